#pragma once

// Multi-granularity encoder: projection into the joint space, attention
// enhancement of local features, global-query-guided local aggregation
// (GGLA) and gated fusion of fine-grained and global embeddings.
//
// Each operation exists on the tape (ad::Var) for training and as a plain
// value overload for inference and tests.

#include <aahr/autodiff.hpp>
#include <aahr/params.hpp>
#include <aahr/tensorio.hpp>

#include <cmath>

namespace aahr::encoder {

using ad::Var;

enum class Modality { image, text };

template <typename Scalar>
inline constexpr Scalar kNormFloor = Scalar(1e-12);

// ---------------------------------------------------------------------------
// Projection

template <typename Scalar>
Var<Scalar> affine(const Var<Scalar>& x, const Var<Scalar>& w, const Var<Scalar>& b) {
  if (x.cols() != w.rows()) {
    throw ShapeError("projection: input " + shape_of(x.value()) + " vs map " + shape_of(w.value()));
  }
  return ad::add_row(ad::matmul(x, w), b);
}

template <typename Scalar>
struct Projected {
  Var<Scalar> regions, words, global_image, global_text;
};

template <typename Scalar>
Projected<Scalar> project_bundle(ad::Graph<Scalar>& g, const io::FeatureBundle& b,
                                 const ProjectionParams<Var<Scalar>>& p) {
  return {affine(g.constant(b.regions.cast<Scalar>()), p.region_w, p.region_b),
          affine(g.constant(b.words.cast<Scalar>()), p.word_w, p.word_b),
          affine(g.constant(b.global_image.cast<Scalar>()), p.image_global_w, p.image_global_b),
          affine(g.constant(b.global_text.cast<Scalar>()), p.text_global_w, p.text_global_b)};
}

template <typename Scalar>
struct ProjectedValues {
  Mat<Scalar> regions, words, global_image, global_text;
};

template <typename Scalar>
ProjectedValues<Scalar> project_bundle(const io::FeatureBundle& b, const ProjectionParams<Mat<Scalar>>& params) {
  ad::Graph<Scalar> g;
  const auto p = lift(g, params, false);
  const auto out = project_bundle(g, b, p);
  return {out.regions.value(), out.words.value(), out.global_image.value(), out.global_text.value()};
}

// ---------------------------------------------------------------------------
// Local enhancement: X + softmax(X Wq (X Wk)^T / sqrt(d)) X Wv Wo

template <typename Scalar>
struct Enhanced {
  Var<Scalar> features;
  Var<Scalar> attention;  // n x n, rows are distributions
};

template <typename Scalar>
Enhanced<Scalar> enhance_locals_detailed(const Var<Scalar>& x, const EnhancerParams<Var<Scalar>>& e) {
  if (x.rows() < 1) throw ShapeError("enhance_locals: empty input");
  require_finite(x.value(), "enhance_locals");
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(x.cols()));
  const auto q = ad::matmul(x, e.query);
  const auto k = ad::matmul(x, e.key);
  const auto att = ad::softmax_rows(scale * ad::matmul(q, ad::transpose(k)));
  const auto update = ad::matmul(ad::matmul(att, ad::matmul(x, e.value)), e.output);
  return {x + update, att};
}

template <typename Scalar>
Var<Scalar> enhance_locals(const Var<Scalar>& x, const EnhancerParams<Var<Scalar>>& e) {
  return enhance_locals_detailed(x, e).features;
}

template <typename Scalar>
Mat<Scalar> enhance_locals(const Mat<Scalar>& x, const EnhancerParams<Mat<Scalar>>& params) {
  ad::Graph<Scalar> g;
  return enhance_locals(g.constant(x), lift(g, params, false)).value();
}

// ---------------------------------------------------------------------------
// GGLA

/// 1 x n cosines between a 1 x d query and the rows of an n x d codebook.
template <typename Scalar>
Var<Scalar> ggla_coefficients(const Var<Scalar>& query, const Var<Scalar>& codebook) {
  if (query.rows() != 1 || query.cols() != codebook.cols()) {
    throw ShapeError("ggla_coefficients: query " + shape_of(query.value()) + " vs codebook " +
                     shape_of(codebook.value()));
  }
  return ad::matmul(ad::normalize_rows(query, kNormFloor<Scalar>),
                    ad::transpose(ad::normalize_rows(codebook, kNormFloor<Scalar>)));
}

template <typename Scalar>
Mat<Scalar> ggla_coefficients(const Mat<Scalar>& query, const Mat<Scalar>& codebook) {
  if (query.norm() == Scalar(0)) throw NumericError("ggla_coefficients: zero-norm query");
  for (Eigen::Index j = 0; j < codebook.rows(); ++j) {
    if (codebook.row(j).norm() == Scalar(0)) {
      throw NumericError("ggla_coefficients: zero-norm codeword " + std::to_string(j));
    }
  }
  ad::Graph<Scalar> g;
  return ggla_coefficients(g.constant(query), g.constant(codebook)).value();
}

/// Averages the cosine coefficients over every (query map, codebook map)
/// transformation and turns them into pooling weights with a softmax.
template <typename Scalar>
Var<Scalar> ggla_weights(const Var<Scalar>& query, const Var<Scalar>& codebook, const GglaParams<Var<Scalar>>& p) {
  if (p.codes() == 0 || p.codebook_maps.size() != p.codes()) throw ShapeError("ggla_weights: need m_codes >= 1");
  std::vector<Var<Scalar>> coeffs;
  coeffs.reserve(p.codes());
  for (std::size_t k = 0; k < p.codes(); ++k) {
    coeffs.push_back(ggla_coefficients(ad::matmul(query, p.query_maps[k]), ad::matmul(codebook, p.codebook_maps[k])));
  }
  const auto mean = ad::transpose(ad::row_sums(ad::transpose(ad::vstack(coeffs))));
  return ad::softmax_rows((Scalar(1) / static_cast<Scalar>(p.codes())) * mean);
}

template <typename Scalar>
Mat<Scalar> ggla_weights(const Mat<Scalar>& query, const Mat<Scalar>& codebook, const GglaParams<Mat<Scalar>>& params) {
  ad::Graph<Scalar> g;
  return ggla_weights(g.constant(query), g.constant(codebook), lift(g, params, false)).value();
}

/// Weighted sum of local rows: 1 x n weights times n x d locals.
template <typename Scalar>
Var<Scalar> ggla_aggregate(const Var<Scalar>& weights, const Var<Scalar>& locals) {
  if (weights.rows() != 1 || weights.cols() != locals.rows()) {
    throw ShapeError("ggla_aggregate: weights " + shape_of(weights.value()) + " vs locals " +
                     shape_of(locals.value()));
  }
  return ad::matmul(weights, locals);
}

template <typename Scalar>
Mat<Scalar> ggla_aggregate(const Mat<Scalar>& weights, const Mat<Scalar>& locals) {
  ad::Graph<Scalar> g;
  return ggla_aggregate(g.constant(weights), g.constant(locals)).value();
}

// ---------------------------------------------------------------------------
// Gated fusion

template <typename Scalar>
struct Fused {
  Var<Scalar> embedding;  // normalized
  Var<Scalar> mixed;      // gate * fine + (1 - gate) * global, before normalization
  Var<Scalar> gate;       // 1 x 1
};

template <typename Scalar>
Fused<Scalar> gated_fuse(const Var<Scalar>& fine, const Var<Scalar>& global, const FusionParams<Var<Scalar>>& f) {
  if (fine.rows() != 1 || global.rows() != 1 || fine.cols() != global.cols() ||
      f.weight.rows() != 2 * fine.cols() || f.weight.cols() != 1) {
    throw ShapeError("gated_fuse: fine " + shape_of(fine.value()) + ", global " + shape_of(global.value()) +
                     ", weight " + shape_of(f.weight.value()));
  }
  const auto gate = ad::sigmoid(ad::matmul(ad::hstack<Scalar>({fine, global}), f.weight) + f.bias);
  const auto complement = ad::add_scalar(Scalar(-1) * gate, Scalar(1));
  const auto mixed = ad::scale_by(fine, gate) + ad::scale_by(global, complement);
  return {ad::normalize_rows(mixed, kNormFloor<Scalar>), mixed, gate};
}

template <typename Scalar>
struct FusedValues {
  Mat<Scalar> embedding;
  Mat<Scalar> mixed;
  Scalar gate;
};

template <typename Scalar>
FusedValues<Scalar> gated_fuse(const Mat<Scalar>& fine, const Mat<Scalar>& global,
                               const FusionParams<Mat<Scalar>>& params) {
  ad::Graph<Scalar> g;
  const auto out = gated_fuse(g.constant(fine), g.constant(global), lift(g, params, false));
  return {out.embedding.value(), out.mixed.value(), out.gate.scalar()};
}

// ---------------------------------------------------------------------------
// Full chain

template <typename Scalar>
struct Encoded {
  Var<Scalar> embedding;  // 1 x d, unit norm
  Var<Scalar> locals;     // n x d enhanced local features
  Var<Scalar> gate;
};

/// Encodes one side of a pair from its projected locals and global vector.
template <typename Scalar>
Encoded<Scalar> encode_side(const Var<Scalar>& projected_locals, const Var<Scalar>& projected_global,
                            const EnhancerParams<Var<Scalar>>& enhancer, const GglaParams<Var<Scalar>>& ggla,
                            const FusionParams<Var<Scalar>>& fusion) {
  const auto locals = enhance_locals(projected_locals, enhancer);
  const auto weights = ggla_weights(projected_global, locals, ggla);
  const auto fine = ggla_aggregate(weights, locals);
  const auto fused = gated_fuse(fine, projected_global, fusion);
  return {fused.embedding, locals, fused.gate};
}

template <typename Scalar>
Encoded<Scalar> encode_image(ad::Graph<Scalar>& g, const Mat<Scalar>& regions, const Mat<Scalar>& global_image,
                             const EncoderParams<Var<Scalar>>& p) {
  const auto r = affine(g.constant(regions), p.projection.region_w, p.projection.region_b);
  const auto v = affine(g.constant(global_image), p.projection.image_global_w, p.projection.image_global_b);
  return encode_side(r, v, p.image_enhancer, p.image_ggla, p.image_fusion);
}

template <typename Scalar>
Encoded<Scalar> encode_text(ad::Graph<Scalar>& g, const Mat<Scalar>& words, const Mat<Scalar>& global_text,
                            const EncoderParams<Var<Scalar>>& p) {
  const auto w = affine(g.constant(words), p.projection.word_w, p.projection.word_b);
  const auto t = affine(g.constant(global_text), p.projection.text_global_w, p.projection.text_global_b);
  return encode_side(w, t, p.text_enhancer, p.text_ggla, p.text_fusion);
}

template <typename Scalar>
struct EmbeddingPair {
  Mat<Scalar> v;             // 1 x d
  Mat<Scalar> t;             // 1 x d
  Mat<Scalar> image_locals;  // n_r x d
  Mat<Scalar> text_locals;   // n_t x d
};

template <typename Scalar>
EmbeddingPair<Scalar> encode_pair(const io::FeatureBundle& b, const EncoderParams<Mat<Scalar>>& params) {
  ad::Graph<Scalar> g;
  const auto p = lift(g, params, false);
  const auto img = encode_image(g, Mat<Scalar>(b.regions.cast<Scalar>()), Mat<Scalar>(b.global_image.cast<Scalar>()), p);
  const auto txt = encode_text(g, Mat<Scalar>(b.words.cast<Scalar>()), Mat<Scalar>(b.global_text.cast<Scalar>()), p);
  return {img.embedding.value(), txt.embedding.value(), img.locals.value(), txt.locals.value()};
}

/// Image-only inference path: depends on nothing but the image features.
template <typename Scalar>
Mat<Scalar> embed_image(const io::FeatureBundle& b, const EncoderParams<Mat<Scalar>>& params) {
  ad::Graph<Scalar> g;
  const auto p = lift(g, params, false);
  return encode_image(g, Mat<Scalar>(b.regions.cast<Scalar>()), Mat<Scalar>(b.global_image.cast<Scalar>()), p)
      .embedding.value();
}

template <typename Scalar>
Mat<Scalar> embed_text(const io::FeatureBundle& b, const EncoderParams<Mat<Scalar>>& params) {
  ad::Graph<Scalar> g;
  const auto p = lift(g, params, false);
  return encode_text(g, Mat<Scalar>(b.words.cast<Scalar>()), Mat<Scalar>(b.global_text.cast<Scalar>()), p)
      .embedding.value();
}

}  // namespace aahr::encoder
