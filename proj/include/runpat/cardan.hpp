#pragma once

#include <Eigen/Dense>
#include <cmath>

#include "runpat/common.hpp"

namespace runpat {

template <typename Scalar>
struct CardanAngles {
  Scalar x, y, z;  // degrees
  bool gimbal_lock = false;
};

namespace detail {
template <typename Scalar>
constexpr Scalar deg2rad(Scalar d) {
  return d * Scalar(M_PI) / Scalar(180);
}
template <typename Scalar>
constexpr Scalar rad2deg(Scalar r) {
  return r * Scalar(180) / Scalar(M_PI);
}
}  // namespace detail

// Composes R = Rx(x) * Ry(y) * Rz(z), angles in degrees.
template <typename Scalar>
Eigen::Matrix<Scalar, 3, 3> rotation_from_cardan(Scalar x_deg, Scalar y_deg, Scalar z_deg) {
  using std::cos, std::sin;
  const Scalar x = detail::deg2rad(x_deg), y = detail::deg2rad(y_deg), z = detail::deg2rad(z_deg);
  Eigen::Matrix<Scalar, 3, 3> rx, ry, rz;
  rx << 1, 0, 0, 0, cos(x), -sin(x), 0, sin(x), cos(x);
  ry << cos(y), 0, sin(y), 0, 1, 0, -sin(y), 0, cos(y);
  rz << cos(z), -sin(z), 0, sin(z), cos(z), 0, 0, 0, 1;
  return rx * ry * rz;
}

// X-Y-Z Cardan decomposition of a proper rotation, y in [-90, 90] degrees.
// Near |cos y| < 1e-7 only x+z (or x-z) is determined; x is set to 0 and the
// gimbal_lock flag raised.
template <typename Scalar>
CardanAngles<Scalar> cardan_from_rotation(const Eigen::Matrix<Scalar, 3, 3>& R) {
  const Scalar tol = Scalar(1e-6);
  Eigen::Matrix<Scalar, 3, 3> ortho_err = R.transpose() * R - Eigen::Matrix<Scalar, 3, 3>::Identity();
  if (ortho_err.cwiseAbs().maxCoeff() > tol)
    fail(Err::NotARotation, "matrix is not orthonormal within 1e-6");
  if (std::abs(R.determinant() - Scalar(1)) > tol)
    fail(Err::NotARotation, "determinant is not +1 within 1e-6");

  CardanAngles<Scalar> a;
  // R = Rx*Ry*Rz =>  R(0,2) = sin y,  R(1,2) = -sin x cos y,  R(0,1) = -cos y sin z
  Scalar sy = std::clamp(R(0, 2), Scalar(-1), Scalar(1));
  Scalar y = std::asin(sy);
  Scalar cy = std::cos(y);
  if (std::abs(cy) < Scalar(1e-7)) {
    a.gimbal_lock = true;
    a.x = 0;
    a.y = detail::rad2deg(y);
    // with x = 0:  R(1,0) = sin z * sign-free,  R(1,1) = cos z
    a.z = detail::rad2deg(std::atan2(R(1, 0), R(1, 1)));
    return a;
  }
  a.x = detail::rad2deg(std::atan2(-R(1, 2), R(2, 2)));
  a.y = detail::rad2deg(y);
  a.z = detail::rad2deg(std::atan2(-R(0, 1), R(0, 0)));
  return a;
}

}  // namespace runpat
