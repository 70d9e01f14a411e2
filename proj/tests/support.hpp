#pragma once

#include <aahr/autodiff.hpp>

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace aahr::testing {

inline MatD random_matrix(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  MatD m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = dist(rng);
  }
  return m;
}

inline MatD unit_rows(MatD m) {
  m.rowwise().normalize();
  return m;
}

using LossBuilder = std::function<ad::Var<double>(ad::Graph<double>&, const std::vector<ad::Var<double>>&)>;

/// Worst relative disagreement between the tape gradient and central
/// differences, over every input. Each input's error is normalized by the
/// largest gradient magnitude of that input.
///
/// `numeric_build`, when given, is the function differentiated numerically;
/// it lets stop-gradient targets be held fixed at their unperturbed values.
inline double gradient_error(const std::vector<MatD>& inputs, const LossBuilder& build, double step = 1e-4,
                             const LossBuilder& numeric_build = {}) {
  ad::Graph<double> g;
  std::vector<ad::Var<double>> vars;
  for (const auto& x : inputs) vars.push_back(g.variable(x));
  const auto loss = build(g, vars);
  g.backward(loss);

  auto evaluate = [&](const std::vector<MatD>& xs) {
    ad::Graph<double> h;
    std::vector<ad::Var<double>> cs;
    for (const auto& x : xs) cs.push_back(h.constant(x));
    return (numeric_build ? numeric_build : build)(h, cs).scalar();
  };

  double worst = 0.0;
  std::vector<MatD> probe = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const MatD analytic = vars[k].grad().size() ? vars[k].grad() : MatD::Zero(inputs[k].rows(), inputs[k].cols());
    MatD numeric(inputs[k].rows(), inputs[k].cols());
    for (Eigen::Index i = 0; i < numeric.size(); ++i) {
      const double x = inputs[k].data()[i];
      probe[k].data()[i] = x + step;
      const double up = evaluate(probe);
      probe[k].data()[i] = x - step;
      const double down = evaluate(probe);
      probe[k].data()[i] = x;
      numeric.data()[i] = (up - down) / (2.0 * step);
    }
    const double scale = std::max({analytic.cwiseAbs().maxCoeff(), numeric.cwiseAbs().maxCoeff(), 1e-12});
    worst = std::max(worst, (analytic - numeric).cwiseAbs().maxCoeff() / scale);
  }
  return worst;
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("aahr_" + tag + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

}  // namespace aahr::testing
