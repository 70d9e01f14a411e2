#pragma once

// Prototype-guided cross-modal alignment: softmax scores against trainable
// prototypes, Sinkhorn soft assignments, and the bidirectional
// cross-entropy between one modality's scores and the other's assignments.

#include <aahr/autodiff.hpp>
#include <aahr/types.hpp>

#include <cmath>

namespace aahr::prototype {

using ad::Var;

struct SinkhornConfig {
  int iters = 3;
  double eps = 0.05;
};

/// softmax over prototypes of E * P^T. E is m x d, P is k x d.
template <typename Scalar>
Var<Scalar> prototype_scores(const Var<Scalar>& embeddings, const Var<Scalar>& prototypes) {
  if (embeddings.cols() != prototypes.cols()) {
    throw ShapeError("prototype_scores: embeddings " + shape_of(embeddings.value()) + " vs prototypes " +
                     shape_of(prototypes.value()));
  }
  return ad::softmax_rows(ad::matmul(embeddings, ad::transpose(prototypes)));
}

template <typename Scalar>
Mat<Scalar> prototype_scores(const Mat<Scalar>& embeddings, const Mat<Scalar>& prototypes) {
  ad::Graph<Scalar> g;
  return prototype_scores(g.constant(embeddings), g.constant(prototypes)).value();
}

/// Transport plan before the final row rescale: rows carry mass 1/m,
/// columns approximately 1/k. Each round normalizes columns, then rows.
template <typename Scalar>
Mat<Scalar> sinkhorn_transport(const Mat<Scalar>& scores, const SinkhornConfig& cfg) {
  if (cfg.iters < 1) throw ConfigError("sinkhorn: iters must be >= 1");
  if (!(cfg.eps > 0.0)) throw ConfigError("sinkhorn: eps must be > 0");
  if (scores.rows() == 0 || scores.cols() == 0) throw ShapeError("sinkhorn: empty score matrix");
  require_finite(scores, "sinkhorn");
  const auto m = static_cast<Scalar>(scores.rows());
  const auto k = static_cast<Scalar>(scores.cols());
  const Scalar max = scores.maxCoeff();
  Mat<Scalar> plan = ((scores.array() - max) / static_cast<Scalar>(cfg.eps)).exp().matrix();
  plan /= plan.sum();
  for (int it = 0; it < cfg.iters; ++it) {
    const RowVec<Scalar> col = plan.colwise().sum();
    plan = plan.array().rowwise() / (col.array() * k);
    const ColVec<Scalar> row = plan.rowwise().sum();
    plan = plan.array().colwise() / (row.array() * m);
  }
  return plan;
}

/// Soft assignment matrix D: the transport plan with rows rescaled to sum
/// to one. No gradient flows through it.
template <typename Scalar>
Mat<Scalar> sinkhorn_assign(const Mat<Scalar>& scores, const SinkhornConfig& cfg) {
  Mat<Scalar> plan = sinkhorn_transport(scores, cfg);
  const ColVec<Scalar> row = plan.rowwise().sum();
  return plan.array().colwise() / row.array();
}

/// -(1/m) sum_ij D_ij log softmax_j(u_ij / tau)
template <typename Scalar>
Var<Scalar> alignment_cross_entropy(const Var<Scalar>& scores, const Mat<Scalar>& assignments, Scalar tau) {
  if (scores.rows() != assignments.rows() || scores.cols() != assignments.cols()) {
    throw ShapeError("pga_loss: scores " + shape_of(scores.value()) + " vs assignments " + shape_of(assignments));
  }
  const auto logp = ad::log_softmax_rows((Scalar(1) / tau) * scores);
  return (Scalar(-1) / static_cast<Scalar>(scores.rows())) * ad::sum(ad::cmul_const(logp, assignments));
}

template <typename Scalar>
struct PgaTerms {
  Var<Scalar> image;  // image scores against text assignments
  Var<Scalar> text;   // text scores against image assignments
  Var<Scalar> total;
};

template <typename Scalar>
PgaTerms<Scalar> pga_loss_terms(const Var<Scalar>& image_scores, const Var<Scalar>& text_scores,
                                const Mat<Scalar>& image_assign, const Mat<Scalar>& text_assign, Scalar tau) {
  const auto img = alignment_cross_entropy(image_scores, text_assign, tau);
  const auto txt = alignment_cross_entropy(text_scores, image_assign, tau);
  return {img, txt, img + txt};
}

template <typename Scalar>
Var<Scalar> pga_loss(const Var<Scalar>& image_scores, const Var<Scalar>& text_scores, const Mat<Scalar>& image_assign,
                     const Mat<Scalar>& text_assign, Scalar tau) {
  return pga_loss_terms(image_scores, text_scores, image_assign, text_assign, tau).total;
}

template <typename Scalar>
Scalar pga_loss(const Mat<Scalar>& image_scores, const Mat<Scalar>& text_scores, const Mat<Scalar>& image_assign,
                const Mat<Scalar>& text_assign, Scalar tau) {
  ad::Graph<Scalar> g;
  return pga_loss(g.constant(image_scores), g.constant(text_scores), image_assign, text_assign, tau).scalar();
}

/// Full alignment loss from embeddings: scores, stop-gradient assignments,
/// cross-entropy in both directions.
template <typename Scalar>
Var<Scalar> pga_from_embeddings(const Var<Scalar>& images, const Var<Scalar>& texts, const Var<Scalar>& prototypes,
                                Scalar tau, const SinkhornConfig& cfg) {
  const auto u_v = prototype_scores(images, prototypes);
  const auto u_t = prototype_scores(texts, prototypes);
  const Mat<Scalar> d_v = sinkhorn_assign(u_v.value(), cfg);
  const Mat<Scalar> d_t = sinkhorn_assign(u_t.value(), cfg);
  return pga_loss(u_v, u_t, d_v, d_t, tau);
}

/// Rows of P back to unit norm.
template <typename Scalar>
void renormalize_prototypes(Mat<Scalar>& prototypes) {
  for (Eigen::Index i = 0; i < prototypes.rows(); ++i) {
    const Scalar n = prototypes.row(i).norm();
    if (n > Scalar(0)) prototypes.row(i) /= n;
  }
}

}  // namespace aahr::prototype
