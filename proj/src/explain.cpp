#include "runpat/explain.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <sstream>

#include "runpat/csv.hpp"
#include "runpat/dataset.hpp"

namespace runpat {

namespace {

std::vector<std::vector<int>> identity_groups(int m) {
  std::vector<std::vector<int>> g(m);
  for (int i = 0; i < m; ++i) g[i] = {i};
  return g;
}

void check_partition(const std::vector<std::vector<int>>& groups, int m) {
  std::vector<char> seen(m, 0);
  for (const auto& g : groups) {
    if (g.empty()) fail(Err::InvariantViolation, "empty shapley group");
    for (int idx : g) {
      if (idx < 0 || idx >= m)
        fail(Err::InvariantViolation, "shapley group index out of range");
      if (seen[idx]++)
        fail(Err::InvariantViolation, "shapley groups must partition the features");
    }
  }
  for (int i = 0; i < m; ++i)
    if (!seen[i])
      fail(Err::InvariantViolation, "feature " + std::to_string(i) + " not in any group");
}

// Evaluates the model on many composed rows in bounded-memory chunks.
class CoalitionEvaluator {
 public:
  CoalitionEvaluator(const ModelFn& f, const Eigen::RowVectorXd& x,
                     const Eigen::RowVectorXd& baseline,
                     const std::vector<std::vector<int>>& groups)
      : f_(f), x_(x), baseline_(baseline), groups_(groups) {}

  // masks: one bitset per requested coalition value.
  std::vector<double> values(const std::vector<std::uint32_t>& masks) const {
    std::vector<double> out(masks.size());
    const std::size_t chunk = 256;
    for (std::size_t at = 0; at < masks.size(); at += chunk) {
      const std::size_t n = std::min(chunk, masks.size() - at);
      Eigen::MatrixXd rows(n, x_.size());
      for (std::size_t i = 0; i < n; ++i) {
        rows.row(i) = baseline_;
        for (std::size_t g = 0; g < groups_.size(); ++g)
          if (masks[at + i] >> g & 1u)
            for (int idx : groups_[g]) rows(i, idx) = x_(idx);
      }
      Eigen::VectorXd p = f_(rows);
      if (p.size() != static_cast<long>(n))
        fail(Err::ShapeMismatch, "model returned a wrong-sized prediction vector");
      for (std::size_t i = 0; i < n; ++i) out[at + i] = p(i);
    }
    return out;
  }

 private:
  const ModelFn& f_;
  const Eigen::RowVectorXd& x_;
  const Eigen::RowVectorXd& baseline_;
  const std::vector<std::vector<int>>& groups_;
};

}  // namespace

ShapleyResult shapley(const ModelFn& f, const Eigen::RowVectorXd& x,
                      const Eigen::RowVectorXd& baseline, const ShapleyConfig& cfg) {
  const int m = static_cast<int>(x.size());
  if (m < 1) fail(Err::EmptyResult, "shapley on an empty feature vector");
  if (baseline.size() != m)
    fail(Err::ShapeMismatch, "baseline length differs from the explained point");
  const std::vector<std::vector<int>> groups =
      cfg.groups ? *cfg.groups : identity_groups(m);
  check_partition(groups, m);
  const int G = static_cast<int>(groups.size());

  CoalitionEvaluator eval(f, x, baseline, groups);
  ShapleyResult res;
  res.phi = Eigen::VectorXd::Zero(G);
  {
    auto ends = eval.values({0u, G < 32 ? ((1u << G) - 1u) : ~0u});
    res.f_baseline = ends[0];
    res.f_x = ends[1];
  }

  if (cfg.mode == ShapleyConfig::Mode::exact) {
    if (G > 12)
      fail(Err::TooManyFeaturesForExact,
           "exact mode handles at most 12 players, got " + std::to_string(G));
    const std::uint32_t full = (1u << G) - 1u;
    std::vector<std::uint32_t> masks(full + 1);
    for (std::uint32_t s = 0; s <= full; ++s) masks[s] = s;
    std::vector<double> v = eval.values(masks);

    std::vector<double> factorial(G + 1, 1.0);
    for (int i = 1; i <= G; ++i) factorial[i] = factorial[i - 1] * i;
    for (int g = 0; g < G; ++g) {
      double phi = 0;
      for (std::uint32_t s = 0; s <= full; ++s) {
        if (s >> g & 1u) continue;
        const int size = std::popcount(s);
        const double w = factorial[size] * factorial[G - 1 - size] / factorial[G];
        phi += w * (v[s | (1u << g)] - v[s]);
      }
      res.phi(g) = phi;
    }
  } else {
    if (cfg.permutations < 100)
      fail(Err::InvariantViolation, "monte-carlo shapley needs at least 100 permutations");
    RngStream rng(derive_seed(cfg.seed, "shapley"));
    std::vector<int> order(G);
    for (int g = 0; g < G; ++g) order[g] = g;
    for (int p = 0; p < cfg.permutations; ++p) {
      rng.shuffle(order);
      std::vector<std::uint32_t> masks(G);
      std::uint32_t mask = 0;
      for (int j = 0; j < G; ++j) {
        mask |= 1u << order[j];
        masks[j] = mask;
      }
      std::vector<double> v = eval.values(masks);
      double prev = res.f_baseline;
      for (int j = 0; j < G; ++j) {
        res.phi(order[j]) += (v[j] - prev) / cfg.permutations;
        prev = v[j];
      }
    }
  }
  res.efficiency_residual = std::abs(res.phi.sum() - (res.f_x - res.f_baseline));
  return res;
}

std::vector<std::vector<int>> tensor_superpixels(int n_structures, int n_channels,
                                                 int n_steps, int bin_width) {
  if (n_structures < 1 || n_channels < 1 || n_steps < 1 || bin_width < 1)
    fail(Err::InvariantViolation, "superpixel dimensions must be positive");
  const int n_bins = (n_steps + bin_width - 1) / bin_width;
  std::vector<std::vector<int>> groups(n_structures * n_bins);
  for (int t = 0; t < n_steps; ++t)
    for (int a = 0; a < n_structures; ++a)
      for (int c = 0; c < n_channels; ++c)
        groups[a * n_bins + t / bin_width].push_back(t * n_structures * n_channels +
                                                     a * n_channels + c);
  return groups;
}

PdpCurve pdp(const ModelFn& f, const Eigen::MatrixXd& X, int feature, int grid_size) {
  if (X.rows() < 1) fail(Err::EmptyResult, "pdp needs at least one data row");
  if (feature < 0 || feature >= X.cols())
    fail(Err::UnknownFeature, "feature index " + std::to_string(feature) +
                                  " outside matrix with " + std::to_string(X.cols()) +
                                  " columns");
  if (grid_size < 2) fail(Err::InvariantViolation, "pdp grid needs at least 2 points");

  std::vector<double> sorted(X.rows());
  for (long i = 0; i < X.rows(); ++i) sorted[i] = X(i, feature);
  std::sort(sorted.begin(), sorted.end());

  PdpCurve curve;
  curve.grid.resize(grid_size);
  curve.mean_pred.resize(grid_size);
  for (int j = 0; j < grid_size; ++j) {
    const double pos = static_cast<double>(j) / (grid_size - 1) * (sorted.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(pos);
    const double frac = pos - static_cast<double>(lo);
    curve.grid(j) = lo + 1 < sorted.size()
                        ? sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac
                        : sorted[lo];
  }
  for (int j = 0; j < grid_size; ++j) {
    Eigen::MatrixXd forced = X;
    forced.col(feature).setConstant(curve.grid(j));
    curve.mean_pred(j) = f(forced).mean();
  }
  return curve;
}

ExplanationMap saliency(nn::Network& net, const nn::Batch& cases, const nn::Batch* points,
                        const std::vector<std::string>& row_labels,
                        const SmoothGradConfig& cfg) {
  if (cases.empty()) fail(Err::NoPositiveCases, "saliency needs at least one positive case");
  if (cfg.n < 1) fail(Err::InvariantViolation, "smoothgrad sample count must be >= 1");
  if (points && points->size() != cases.size())
    fail(Err::ShapeMismatch, "saliency: case/point count mismatch");
  const long T = cases[0].rows(), C = cases[0].cols();
  if (static_cast<long>(row_labels.size()) != C)
    fail(Err::ShapeMismatch, "saliency: one row label per input channel required");

  RngStream rng(derive_seed(cfg.seed, "smoothgrad"));
  nn::Mat total = nn::Mat::Zero(T, C);
  for (std::size_t i = 0; i < cases.size(); ++i) {
    if (cases[i].rows() != T || cases[i].cols() != C)
      fail(Err::ShapeMismatch, "saliency cases differ in shape");
    const double range = cases[i].maxCoeff() - cases[i].minCoeff();
    const double sigma = cfg.sigma_scale * range;
    nn::Mat acc = nn::Mat::Zero(T, C);
    for (int s = 0; s < cfg.n; ++s) {
      nn::Mat noisy = cases[i];
      if (sigma > 0)
        for (long r = 0; r < T; ++r)
          for (long c = 0; c < C; ++c) noisy(r, c) += sigma * rng.normal();
      nn::Batch one{noisy};
      nn::Batch pts;
      if (points) pts.push_back((*points)[i]);
      net.forward(one, points ? &pts : nullptr, false);
      net.backward_output();
      acc += net.stance_grad()[0].cwiseAbs();
    }
    total += acc / cfg.n;
  }
  total /= static_cast<double>(cases.size());

  ExplanationMap map;
  map.method = "saliency";
  map.row_labels = row_labels;
  map.values = total.transpose();
  map.aggregation = "mean |gradient| over " + std::to_string(cfg.n) +
                    " noisy copies and " + std::to_string(cases.size()) + " cases";
  map.baseline = "none";
  return map;
}

ExplanationMap gradcam(nn::Network& net, const nn::Batch& cases, const nn::Batch* points,
                       const std::string& node) {
  if (cases.empty()) fail(Err::NoPositiveCases, "grad-cam needs at least one positive case");
  if (!net.has_node(node)) fail(Err::LayerNotFound, "no node named '" + node + "'");
  const std::string kind = net.node_kind(node);
  if (kind != "conv1d" && kind != "inception_residual")
    fail(Err::LayerNotFound, "node '" + node + "' is a " + kind + ", not convolutional");
  if (points && points->size() != cases.size())
    fail(Err::ShapeMismatch, "grad-cam: case/point count mismatch");

  Eigen::RowVectorXd total = Eigen::RowVectorXd::Zero(kStanceSamples);
  for (std::size_t i = 0; i < cases.size(); ++i) {
    nn::Batch one{cases[i]};
    nn::Batch pts;
    if (points) pts.push_back((*points)[i]);
    net.forward(one, points ? &pts : nullptr, false);
    net.backward_output();
    const nn::Mat& act = net.node_output(node, 0);
    const nn::Mat& grad = net.node_grad(node, 0);
    Eigen::RowVectorXd w = grad.colwise().mean();
    Eigen::VectorXd cam = (act * w.transpose()).cwiseMax(0.0);
    const long T = cam.size();
    for (int t = 0; t < kStanceSamples; ++t) {
      if (T == 1) {
        total(t) += cam(0);
        continue;
      }
      const double pos = static_cast<double>(t) / (kStanceSamples - 1) * (T - 1);
      const long lo = static_cast<long>(pos);
      const double frac = pos - static_cast<double>(lo);
      total(t) += lo + 1 < T ? cam(lo) * (1.0 - frac) + cam(lo + 1) * frac : cam(lo);
    }
  }
  total /= static_cast<double>(cases.size());

  ExplanationMap map;
  map.method = "gradcam";
  map.row_labels = {"time_importance"};
  map.values = total;
  map.aggregation = "mean over " + std::to_string(cases.size()) + " cases";
  map.baseline = "none";
  return map;
}

ExplanationMap shapley_map(const Eigen::VectorXd& phi,
                           const std::vector<std::string>& structure_labels,
                           int n_steps, int bin_width, const std::string& baseline_desc) {
  const int A = static_cast<int>(structure_labels.size());
  const int n_bins = (n_steps + bin_width - 1) / bin_width;
  if (phi.size() != static_cast<long>(A) * n_bins)
    fail(Err::ShapeMismatch, "shapley vector does not match structure x bin grid");
  ExplanationMap map;
  map.method = "shapley";
  map.row_labels = structure_labels;
  map.values.resize(A, n_steps);
  for (int a = 0; a < A; ++a)
    for (int t = 0; t < n_steps; ++t) map.values(a, t) = phi(a * n_bins + t / bin_width);
  map.aggregation = "per-superpixel attribution";
  map.baseline = baseline_desc;
  return map;
}

void write_map_csv(const ExplanationMap& map, const std::filesystem::path& path) {
  if (map.values.rows() != static_cast<long>(map.row_labels.size()))
    fail(Err::ShapeMismatch, "map rows and labels disagree");
  CsvTable t;
  t.comments.push_back("# method=" + map.method);
  t.comments.push_back("# aggregation=" + map.aggregation);
  t.comments.push_back("# baseline=" + map.baseline);
  t.header.push_back("row_label");
  for (long c = 0; c < map.values.cols(); ++c) t.header.push_back("t" + std::to_string(c));
  for (long r = 0; r < map.values.rows(); ++r) {
    std::vector<std::string> row{map.row_labels[r]};
    for (long c = 0; c < map.values.cols(); ++c) row.push_back(fmt_g9(map.values(r, c)));
    t.rows.push_back(std::move(row));
  }
  write_csv(path.string(), t);
}

namespace {

struct Rgb {
  int r, g, b;
};

Rgb sequential_color(double t) {  // white -> deep red
  t = std::clamp(t, 0.0, 1.0);
  return {static_cast<int>(std::lround(255 + t * (165 - 255))),
          static_cast<int>(std::lround(255 + t * (15 - 255))),
          static_cast<int>(std::lround(255 + t * (21 - 255)))};
}

Rgb diverging_color(double t) {  // blue -> white -> red over [-1, 1]
  t = std::clamp(t, -1.0, 1.0);
  if (t < 0) {
    const double u = -t;
    return {static_cast<int>(std::lround(255 + u * (33 - 255))),
            static_cast<int>(std::lround(255 + u * (102 - 255))),
            static_cast<int>(std::lround(255 + u * (172 - 255)))};
  }
  return {static_cast<int>(std::lround(255 + t * (178 - 255))),
          static_cast<int>(std::lround(255 + t * (24 - 255))),
          static_cast<int>(std::lround(255 + t * (43 - 255)))};
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    switch (ch) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      default: out += ch;
    }
  }
  return out;
}

}  // namespace

void write_map_svg(const ExplanationMap& map, const std::filesystem::path& path) {
  const long rows = map.values.rows(), cols = map.values.cols();
  const int cell_w = 8, cell_h = 18, gutter = 170, top = 34;
  const int width = gutter + cell_w * static_cast<int>(cols) + 10;
  const int height = top + cell_h * static_cast<int>(rows) + 10;
  const bool diverging = map.method == "shapley";
  const double vmin = map.values.minCoeff(), vmax = map.values.maxCoeff();
  const double vabs = std::max(std::abs(vmin), std::abs(vmax));

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
     << height << "\" font-family=\"monospace\">\n";
  os << "<text x=\"6\" y=\"16\" font-size=\"12\">" << xml_escape(map.method) << " ["
     << fmt_g9(vmin) << ", " << fmt_g9(vmax) << "] " << xml_escape(map.aggregation)
     << "</text>\n";
  for (long r = 0; r < rows; ++r) {
    os << "<text x=\"6\" y=\"" << top + cell_h * r + 13 << "\" font-size=\"10\">"
       << xml_escape(map.row_labels[r]) << "</text>\n";
    for (long c = 0; c < cols; ++c) {
      const double v = map.values(r, c);
      Rgb col{255, 255, 255};
      if (diverging) {
        if (vabs > 0) col = diverging_color(v / vabs);
      } else if (vmax > vmin) {
        col = sequential_color((v - vmin) / (vmax - vmin));
      }
      os << "<rect x=\"" << gutter + cell_w * c << "\" y=\"" << top + cell_h * r
         << "\" width=\"" << cell_w << "\" height=\"" << cell_h << "\" fill=\"rgb(" << col.r
         << "," << col.g << "," << col.b << ")\"/>\n";
    }
  }
  os << "</svg>\n";
  std::ofstream f(path);
  if (!f) fail(Err::MissingFile, "cannot write " + path.string());
  f << os.str();
}

void write_ranking_csv(const std::vector<std::string>& names, const Eigen::VectorXd& phi,
                       double efficiency_residual, const std::filesystem::path& path) {
  if (static_cast<long>(names.size()) != phi.size())
    fail(Err::ShapeMismatch, "ranking names and values disagree");
  std::vector<int> order(names.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return std::abs(phi(a)) > std::abs(phi(b));
  });
  CsvTable t;
  t.comments.push_back("# method=shapley");
  t.comments.push_back("# efficiency_residual=" + fmt_g9(efficiency_residual));
  t.header = {"feature", "phi"};
  for (int i : order) t.rows.push_back({names[i], fmt_g9(phi(i))});
  write_csv(path.string(), t);
}

void write_pdp_csv(const std::string& feature, const PdpCurve& curve,
                   const std::filesystem::path& path) {
  CsvTable t;
  t.comments.push_back("# method=pdp");
  t.comments.push_back("# feature=" + feature);
  t.header = {"value", "mean_prediction"};
  for (long j = 0; j < curve.grid.size(); ++j)
    t.rows.push_back({fmt_g9(curve.grid(j)), fmt_g9(curve.mean_pred(j))});
  write_csv(path.string(), t);
}

void write_pdp_svg(const std::string& feature, const PdpCurve& curve,
                   const std::filesystem::path& path) {
  const int width = 420, height = 260, margin = 40;
  const double x0 = curve.grid.minCoeff(), x1 = curve.grid.maxCoeff();
  const double y0 = 0.0, y1 = 1.0;
  auto px = [&](double v) {
    return x1 > x0 ? margin + (v - x0) / (x1 - x0) * (width - 2 * margin)
                   : width / 2.0;
  };
  auto py = [&](double v) {
    return height - margin - (v - y0) / (y1 - y0) * (height - 2 * margin);
  };
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
     << height << "\" font-family=\"monospace\">\n";
  os << "<text x=\"6\" y=\"16\" font-size=\"12\">pdp " << xml_escape(feature)
     << "</text>\n";
  os << "<rect x=\"" << margin << "\" y=\"" << margin << "\" width=\""
     << width - 2 * margin << "\" height=\"" << height - 2 * margin
     << "\" fill=\"none\" stroke=\"black\"/>\n";
  os << "<text x=\"" << margin << "\" y=\"" << height - 8 << "\" font-size=\"10\">"
     << fmt_g9(x0) << "</text>\n";
  os << "<text x=\"" << width - margin - 60 << "\" y=\"" << height - 8
     << "\" font-size=\"10\">" << fmt_g9(x1) << "</text>\n";
  os << "<polyline fill=\"none\" stroke=\"rgb(178,24,43)\" stroke-width=\"2\" points=\"";
  for (long j = 0; j < curve.grid.size(); ++j) {
    if (j) os << " ";
    os << fmt_g9(px(curve.grid(j))) << "," << fmt_g9(py(curve.mean_pred(j)));
  }
  os << "\"/>\n</svg>\n";
  std::ofstream f(path);
  if (!f) fail(Err::MissingFile, "cannot write " + path.string());
  f << os.str();
}

}  // namespace runpat
