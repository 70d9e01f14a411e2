#pragma once

// In-batch instance neighborhood modeling: the 2m x 2m association graph,
// intra-modal and joint GCN layers, median-filtered GAT, hard-negative
// triplet loss and the combined neighborhood interaction objective.
//
// The association graph is built from detached embeddings and acts as a
// constant adjacency; gradients flow through node features and layer
// weights only.

#include <aahr/autodiff.hpp>
#include <aahr/params.hpp>
#include <aahr/prototype.hpp>

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

namespace aahr::neighborhood {

using ad::Var;

inline constexpr double kMaskValue = -1e9;
inline constexpr double kDegreeGuard = 1e-6;
inline constexpr double kLeakySlope = 0.01;

/// S_ij = exp(-||e_i - e_j||^2 / epsilon)
template <typename Scalar>
Mat<Scalar> intra_modal_similarity(const Mat<Scalar>& e, Scalar epsilon = Scalar(1)) {
  if (!(epsilon > Scalar(0))) throw ConfigError("intra_modal_similarity: epsilon must be > 0");
  const Eigen::Index m = e.rows();
  Mat<Scalar> s(m, m);
  for (Eigen::Index i = 0; i < m; ++i) {
    s(i, i) = Scalar(1);
    for (Eigen::Index j = i + 1; j < m; ++j) {
      const Scalar v = std::exp(-(e.row(i) - e.row(j)).squaredNorm() / epsilon);
      s(i, j) = v;
      s(j, i) = v;
    }
  }
  return s;
}

struct CrossScores {
  double image_to_text;  // mean over regions of the best word
  double text_to_image;  // mean over words of the best region
};

template <typename Scalar>
CrossScores cross_modal_similarity(const Mat<Scalar>& regions, const Mat<Scalar>& words) {
  if (regions.rows() == 0 || words.rows() == 0) throw ShapeError("cross_modal_similarity: empty region or word set");
  if (regions.cols() != words.cols()) throw ShapeError("cross_modal_similarity: feature dims differ");
  const Mat<Scalar> dots = regions * words.transpose();
  return {static_cast<double>(dots.rowwise().maxCoeff().mean()), static_cast<double>(dots.colwise().maxCoeff().mean())};
}

template <typename Scalar>
struct AssociationGraph {
  Mat<Scalar> image_image, text_text;  // intra-modal kernels
  Mat<Scalar> image_text;              // (i, j): image i regions against text j words
  Mat<Scalar> text_image;              // (i, j): text i words against image j regions
  Mat<Scalar> full;                    // [[II, IT], [TI, TT]]
  Scalar epsilon = Scalar(1);

  Eigen::Index batch() const { return image_image.rows(); }
};

template <typename Scalar>
Mat<Scalar> assemble_blocks(const Mat<Scalar>& ii, const Mat<Scalar>& it, const Mat<Scalar>& ti, const Mat<Scalar>& tt) {
  const Eigen::Index m = ii.rows();
  Mat<Scalar> s(2 * m, 2 * m);
  s.topLeftCorner(m, m) = ii;
  s.topRightCorner(m, m) = it;
  s.bottomLeftCorner(m, m) = ti;
  s.bottomRightCorner(m, m) = tt;
  return s;
}

/// Local features are row-normalized here before the max-matching scores.
template <typename Scalar>
AssociationGraph<Scalar> assemble_graph(const Mat<Scalar>& images, const Mat<Scalar>& texts,
                                        const std::vector<Mat<Scalar>>& image_locals,
                                        const std::vector<Mat<Scalar>>& text_locals, Scalar epsilon = Scalar(1)) {
  const Eigen::Index m = images.rows();
  if (texts.rows() != m || static_cast<Eigen::Index>(image_locals.size()) != m ||
      static_cast<Eigen::Index>(text_locals.size()) != m) {
    throw ShapeError("assemble_graph: batch sizes differ");
  }
  std::vector<Mat<Scalar>> regions, words;
  for (const auto& r : image_locals) regions.push_back(r.rowwise().normalized());
  for (const auto& w : text_locals) words.push_back(w.rowwise().normalized());

  AssociationGraph<Scalar> g;
  g.epsilon = epsilon;
  g.image_image = intra_modal_similarity(images, epsilon);
  g.text_text = intra_modal_similarity(texts, epsilon);
  g.image_text.resize(m, m);
  g.text_image.resize(m, m);
  for (Eigen::Index i = 0; i < m; ++i) {
    for (Eigen::Index j = 0; j < m; ++j) {
      g.image_text(i, j) = static_cast<Scalar>(cross_modal_similarity(regions[i], words[j]).image_to_text);
      g.text_image(i, j) = static_cast<Scalar>(cross_modal_similarity(regions[j], words[i]).text_to_image);
    }
  }
  g.full = assemble_blocks(g.image_image, g.image_text, g.text_image, g.text_text);
  return g;
}

/// Midpoint median (average of the two central values for even counts).
template <typename Derived>
typename Derived::Scalar median(const Eigen::MatrixBase<Derived>& block) {
  using Scalar = typename Derived::Scalar;
  std::vector<Scalar> v(static_cast<std::size_t>(block.size()));
  Eigen::Index at = 0;
  for (Eigen::Index j = 0; j < block.cols(); ++j) {
    for (Eigen::Index i = 0; i < block.rows(); ++i) v[static_cast<std::size_t>(at++)] = block(i, j);
  }
  const std::size_t n = v.size();
  std::sort(v.begin(), v.end());
  return n % 2 ? v[n / 2] : (v[n / 2 - 1] + v[n / 2]) / Scalar(2);
}

template <typename Scalar>
struct FilteredGraph {
  Mat<Scalar> filtered;  // kept entries times alpha, others kMaskValue
  Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> kept;
  Scalar alpha = Scalar(1.5);
  Scalar mask_value = Scalar(kMaskValue);
};

/// Per m x m block: entries >= the block median are amplified by alpha, the
/// rest are masked. Ties with the median are kept.
template <typename Scalar>
FilteredGraph<Scalar> filter_graph(const Mat<Scalar>& s, Scalar alpha = Scalar(1.5)) {
  if (s.rows() != s.cols() || s.rows() % 2 != 0 || s.rows() == 0) {
    throw ShapeError("filter_graph: expected a 2m x 2m matrix, got " + shape_of(s));
  }
  require_finite(s, "filter_graph");
  const Eigen::Index m = s.rows() / 2;
  FilteredGraph<Scalar> out;
  out.alpha = alpha;
  out.filtered.resize(s.rows(), s.cols());
  out.kept.resize(s.rows(), s.cols());
  for (Eigen::Index bi = 0; bi < 2; ++bi) {
    for (Eigen::Index bj = 0; bj < 2; ++bj) {
      const auto block = s.block(bi * m, bj * m, m, m);
      const Scalar med = median(block);
      for (Eigen::Index i = 0; i < m; ++i) {
        for (Eigen::Index j = 0; j < m; ++j) {
          const Scalar v = block(i, j);
          const bool keep = v >= med;
          out.kept(bi * m + i, bj * m + j) = keep;
          out.filtered(bi * m + i, bj * m + j) = keep ? alpha * v : out.mask_value;
        }
      }
    }
  }
  return out;
}

/// D^-1/2 max(A, 0) D^-1/2 with D the row sums plus a small guard.
template <typename Scalar>
Mat<Scalar> normalized_adjacency(const Mat<Scalar>& a) {
  if (a.rows() != a.cols()) throw ShapeError("normalized_adjacency: non-square " + shape_of(a));
  const Mat<Scalar> pos = a.cwiseMax(Scalar(0));
  const ColVec<Scalar> inv_sqrt =
      (pos.rowwise().sum().array() + static_cast<Scalar>(kDegreeGuard)).rsqrt().matrix();
  return inv_sqrt.asDiagonal() * pos * inv_sqrt.asDiagonal();
}

/// Inverted dropout mask; an all-ones matrix when rate is zero or no
/// generator is supplied.
template <typename Scalar>
Mat<Scalar> dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, std::mt19937_64* rng) {
  if (rng == nullptr || rate <= 0.0) return Mat<Scalar>::Ones(rows, cols);
  if (rate >= 1.0) throw ConfigError("dropout rate must be in [0, 1)");
  std::bernoulli_distribution keep(1.0 - rate);
  const Scalar scale = static_cast<Scalar>(1.0 / (1.0 - rate));
  Mat<Scalar> mask(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) mask(i, j) = keep(*rng) ? scale : Scalar(0);
  }
  return mask;
}

/// H + LeakyReLU(Ahat dropout(H) W). Dropout is active only when `rng` is
/// given.
template <typename Scalar>
Var<Scalar> gcn_layer(const Var<Scalar>& h, const Mat<Scalar>& adjacency, const Var<Scalar>& weight,
                      double dropout = 0.0, std::mt19937_64* rng = nullptr) {
  if (h.rows() < 1) throw ShapeError("gcn_layer: empty node set");
  if (adjacency.rows() != h.rows() || adjacency.cols() != h.rows()) {
    throw ShapeError("gcn_layer: adjacency " + shape_of(adjacency) + " for " + std::to_string(h.rows()) + " nodes");
  }
  auto& g = h.graph();
  const auto dropped = ad::cmul_const(h, dropout_mask<Scalar>(h.rows(), h.cols(), dropout, rng));
  const auto propagated = ad::matmul(g.constant(normalized_adjacency(adjacency)), ad::matmul(dropped, weight));
  return h + ad::leaky_relu(propagated, static_cast<Scalar>(kLeakySlope));
}

template <typename Scalar>
Mat<Scalar> gcn_layer(const Mat<Scalar>& h, const Mat<Scalar>& adjacency, const Mat<Scalar>& weight) {
  ad::Graph<Scalar> g;
  return gcn_layer(g.constant(h), adjacency, g.constant(weight)).value();
}

/// Image and text node features stacked along the batch axis, propagated
/// over the full association graph.
template <typename Scalar>
Var<Scalar> joint_gcn(const Var<Scalar>& image_nodes, const Var<Scalar>& text_nodes, const Mat<Scalar>& s,
                      const Var<Scalar>& weight, double dropout = 0.0, std::mt19937_64* rng = nullptr) {
  if (image_nodes.rows() != text_nodes.rows()) throw ShapeError("joint_gcn: modality batch sizes differ");
  return gcn_layer(ad::vstack<Scalar>({image_nodes, text_nodes}), s, weight, dropout, rng);
}

template <typename Scalar>
struct GatOutput {
  Var<Scalar> nodes;                    // 2m x d, H + attention * V (before normalization)
  Var<Scalar> images, texts;            // m x d each, unit rows
  std::vector<Mat<Scalar>> attention;   // per head, 2m x 2m
};

/// softmax(Q K^T / sqrt(d_k) + S_tilde) V with a residual. Heads split the
/// feature axis evenly.
template <typename Scalar>
GatOutput<Scalar> gat_layer(const Var<Scalar>& h, const Mat<Scalar>& filtered, const Var<Scalar>& query_w,
                            const Var<Scalar>& key_w, const Var<Scalar>& value_w, int heads = 1,
                            double dropout = 0.0, std::mt19937_64* rng = nullptr) {
  const Eigen::Index n = h.rows();
  if (filtered.rows() != n || filtered.cols() != n) {
    throw ShapeError("gat_layer: filtered graph " + shape_of(filtered) + " for " + std::to_string(n) + " nodes");
  }
  if (n % 2 != 0) throw ShapeError("gat_layer: node count must be 2m");
  if (heads < 1 || h.cols() % heads != 0) throw ConfigError("gat_layer: heads must divide the feature dim");
  for (Eigen::Index i = 0; i < n; ++i) {
    if ((filtered.row(i).array() > static_cast<Scalar>(kMaskValue / 2)).count() == 0) {
      throw NumericError("gat_layer: row " + std::to_string(i) + " is fully masked");
    }
  }
  const Eigen::Index dk = h.cols() / heads;
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dk));
  const auto q = ad::matmul(h, query_w);
  const auto k = ad::matmul(h, key_w);
  const auto v = ad::matmul(h, value_w);
  GatOutput<Scalar> out;
  std::vector<Var<Scalar>> head_out;
  for (int hd = 0; hd < heads; ++hd) {
    const auto qh = heads == 1 ? q : ad::slice_cols(q, hd * dk, dk);
    const auto kh = heads == 1 ? k : ad::slice_cols(k, hd * dk, dk);
    const auto vh = heads == 1 ? v : ad::slice_cols(v, hd * dk, dk);
    auto att = ad::softmax_rows(ad::add_const(scale * ad::matmul(qh, ad::transpose(kh)), filtered));
    out.attention.push_back(att.value());
    if (rng != nullptr && dropout > 0.0) att = ad::cmul_const(att, dropout_mask<Scalar>(n, n, dropout, rng));
    head_out.push_back(ad::matmul(att, vh));
  }
  const auto mixed = heads == 1 ? head_out.front() : ad::hstack(head_out);
  out.nodes = h + mixed;
  const Eigen::Index m = n / 2;
  out.images = ad::normalize_rows(ad::slice_rows(out.nodes, 0, m));
  out.texts = ad::normalize_rows(ad::slice_rows(out.nodes, m, m));
  return out;
}

/// Hard-negative triplet loss over an m x m similarity matrix whose diagonal
/// holds the positives, summed over the batch. Zero when m = 1.
template <typename Scalar>
Var<Scalar> triplet_loss(const Var<Scalar>& sims, Scalar gamma) {
  if (sims.rows() != sims.cols()) throw ShapeError("triplet_loss: non-square " + shape_of(sims.value()));
  auto& g = sims.graph();
  const Eigen::Index m = sims.rows();
  if (m < 2) return g.constant(Mat<Scalar>::Zero(1, 1));
  Mat<Scalar> diag_mask = Mat<Scalar>::Zero(m, m);
  diag_mask.diagonal().setConstant(static_cast<Scalar>(kMaskValue));
  const auto masked = ad::add_const(sims, diag_mask);
  const auto pos = ad::diagonal(sims);                         // m x 1
  const auto hardest_text = ad::row_max(masked);               // m x 1, per image
  const auto hardest_image = ad::transpose(ad::col_max(masked));  // m x 1, per text
  const auto margin = ad::add_scalar(Scalar(-1) * pos, gamma);
  return ad::sum(ad::relu(margin + hardest_text)) + ad::sum(ad::relu(margin + hardest_image));
}

template <typename Scalar>
Scalar triplet_loss(const Mat<Scalar>& sims, Scalar gamma) {
  ad::Graph<Scalar> g;
  return triplet_loss(g.constant(sims), gamma).scalar();
}

/// Triplet loss for image rows `v` against text rows `t`.
template <typename Scalar>
Var<Scalar> triplet_on(const Var<Scalar>& v, const Var<Scalar>& t, Scalar gamma) {
  return triplet_loss(ad::matmul(v, ad::transpose(t)), gamma);
}

template <typename Scalar>
struct NsiTerms {
  Var<Scalar> base;           // tri(V, T)
  Var<Scalar> enhanced;       // tri(V^, T^)
  Var<Scalar> base_image;     // tri(V, T^)
  Var<Scalar> base_text;      // tri(V^, T)
  Var<Scalar> enhanced_pga;   // PGA(V^, T^)
  Var<Scalar> total;
};

template <typename Scalar>
NsiTerms<Scalar> nsi_loss(const Var<Scalar>& v, const Var<Scalar>& t, const Var<Scalar>& v_hat,
                          const Var<Scalar>& t_hat, const Var<Scalar>& prototypes, Scalar gamma, Scalar tau,
                          const prototype::SinkhornConfig& sinkhorn) {
  NsiTerms<Scalar> terms;
  terms.base = triplet_on(v, t, gamma);
  terms.enhanced = triplet_on(v_hat, t_hat, gamma);
  terms.base_image = triplet_on(v, t_hat, gamma);
  terms.base_text = triplet_on(v_hat, t, gamma);
  terms.enhanced_pga = prototype::pga_from_embeddings(v_hat, t_hat, prototypes, tau, sinkhorn);
  terms.total = terms.base + terms.enhanced + terms.base_image + terms.base_text + terms.enhanced_pga;
  return terms;
}

struct InteractionConfig {
  double epsilon = 1.0;
  double alpha = 1.5;
  double dropout_gcn = 0.6;
  double dropout_gat = 0.1;
  int heads = 1;
};

template <typename Scalar>
struct Interaction {
  AssociationGraph<Scalar> graph;
  FilteredGraph<Scalar> filtered;
  GatOutput<Scalar> gat;
};

/// Full neighborhood pass for one batch: graph from detached embeddings and
/// locals, intra-modal GCNs, joint GCN, filtered GAT.
template <typename Scalar>
Interaction<Scalar> interact(const Var<Scalar>& v, const Var<Scalar>& t, const std::vector<Mat<Scalar>>& image_locals,
                             const std::vector<Mat<Scalar>>& text_locals, const GraphParams<Var<Scalar>>& p,
                             const InteractionConfig& cfg, std::mt19937_64* rng) {
  Interaction<Scalar> out{assemble_graph(v.value(), t.value(), image_locals, text_locals,
                                         static_cast<Scalar>(cfg.epsilon)),
                          {},
                          {}};
  out.filtered = filter_graph(out.graph.full, static_cast<Scalar>(cfg.alpha));
  const auto h_img = gcn_layer(v, out.graph.image_image, p.intra_image, cfg.dropout_gcn, rng);
  const auto h_txt = gcn_layer(t, out.graph.text_text, p.intra_text, cfg.dropout_gcn, rng);
  const auto joint = joint_gcn(h_img, h_txt, out.graph.full, p.joint, cfg.dropout_gcn, rng);
  out.gat = gat_layer(joint, out.filtered.filtered, p.gat_query, p.gat_key, p.gat_value, cfg.heads, cfg.dropout_gat,
                      rng);
  return out;
}

}  // namespace aahr::neighborhood
