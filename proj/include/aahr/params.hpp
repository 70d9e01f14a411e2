#pragma once

// Parameter sets. Every struct is templated on its element type: a dense
// matrix for storage, or an ad::Var once lifted onto a tape. A static
// `visit(f, prefix, p...)` walks the fields of any number of congruent
// instances in lockstep, calling f(name, field...). Everything generic about
// parameters (serialization, momentum copies, the optimizer) is written once
// against it.
//
// Row-vector convention: features are rows, so a map from a to b is an
// a x b matrix applied as x * W, and biases are 1 x b rows.

#include <aahr/autodiff.hpp>
#include <aahr/types.hpp>

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace aahr {

template <typename T>
struct ProjectionParams {
  T region_w, region_b;              // d_v x d, 1 x d
  T word_w, word_b;                  // d_w x d, 1 x d
  T image_global_w, image_global_b;  // d_g x d, 1 x d
  T text_global_w, text_global_b;    // d_g x d, 1 x d

  template <typename F, typename... Ps>
  static void visit(F&& f, const std::string& prefix, Ps&&... p) {
    f(prefix + "region.weight", p.region_w...);
    f(prefix + "region.bias", p.region_b...);
    f(prefix + "word.weight", p.word_w...);
    f(prefix + "word.bias", p.word_b...);
    f(prefix + "image_global.weight", p.image_global_w...);
    f(prefix + "image_global.bias", p.image_global_b...);
    f(prefix + "text_global.weight", p.text_global_w...);
    f(prefix + "text_global.bias", p.text_global_b...);
  }
};

/// Single attention layer over a fully connected local-feature graph.
template <typename T>
struct EnhancerParams {
  T query, key, value, output;  // d x d each

  template <typename F, typename... Ps>
  static void visit(F&& f, const std::string& prefix, Ps&&... p) {
    f(prefix + "query", p.query...);
    f(prefix + "key", p.key...);
    f(prefix + "value", p.value...);
    f(prefix + "output", p.output...);
  }
};

/// One query map and one codebook map per transformation.
template <typename T>
struct GglaParams {
  std::vector<T> query_maps;     // m_codes x (d x d)
  std::vector<T> codebook_maps;  // m_codes x (d x d)

  std::size_t codes() const { return query_maps.size(); }

  template <typename F, typename First, typename... Ps>
  static void visit(F&& f, const std::string& prefix, First&& first, Ps&&... p) {
    for (std::size_t i = 0; i < first.query_maps.size(); ++i) {
      f(prefix + "query." + std::to_string(i), first.query_maps[i], p.query_maps[i]...);
    }
    for (std::size_t i = 0; i < first.codebook_maps.size(); ++i) {
      f(prefix + "codebook." + std::to_string(i), first.codebook_maps[i], p.codebook_maps[i]...);
    }
  }
};

template <typename T>
struct FusionParams {
  T weight;  // 2d x 1, applied to [fine, global]
  T bias;    // 1 x 1

  template <typename F, typename... Ps>
  static void visit(F&& f, const std::string& prefix, Ps&&... p) {
    f(prefix + "weight", p.weight...);
    f(prefix + "bias", p.bias...);
  }
};

template <typename T>
struct EncoderParams {
  ProjectionParams<T> projection;
  EnhancerParams<T> image_enhancer, text_enhancer;
  GglaParams<T> image_ggla, text_ggla;
  FusionParams<T> image_fusion, text_fusion;

  template <typename F, typename... Ps>
  static void visit(F&& f, const std::string& prefix, Ps&&... p) {
    ProjectionParams<T>::visit(f, prefix + "projection.", p.projection...);
    EnhancerParams<T>::visit(f, prefix + "image_enhancer.", p.image_enhancer...);
    EnhancerParams<T>::visit(f, prefix + "text_enhancer.", p.text_enhancer...);
    GglaParams<T>::visit(f, prefix + "image_ggla.", p.image_ggla...);
    GglaParams<T>::visit(f, prefix + "text_ggla.", p.text_ggla...);
    FusionParams<T>::visit(f, prefix + "image_fusion.", p.image_fusion...);
    FusionParams<T>::visit(f, prefix + "text_fusion.", p.text_fusion...);
  }
};

template <typename T>
struct GraphParams {
  T intra_image, intra_text, joint;      // GCN weights, d x d
  T gat_query, gat_key, gat_value;       // d x d

  template <typename F, typename... Ps>
  static void visit(F&& f, const std::string& prefix, Ps&&... p) {
    f(prefix + "intra_image", p.intra_image...);
    f(prefix + "intra_text", p.intra_text...);
    f(prefix + "joint", p.joint...);
    f(prefix + "gat_query", p.gat_query...);
    f(prefix + "gat_key", p.gat_key...);
    f(prefix + "gat_value", p.gat_value...);
  }
};

template <typename T>
struct ModelParams {
  EncoderParams<T> encoder;
  T prototypes;  // k x d, rows unit norm
  GraphParams<T> graph;

  template <typename F, typename... Ps>
  static void visit(F&& f, const std::string& prefix, Ps&&... p) {
    EncoderParams<T>::visit(f, prefix + "encoder.", p.encoder...);
    f(prefix + "prototypes", p.prototypes...);
    GraphParams<T>::visit(f, prefix + "graph.", p.graph...);
  }
};

// Sizing of vector-valued members before a lockstep visit.
template <typename A, typename B>
void resize_like(GglaParams<A>& dst, const GglaParams<B>& src) {
  dst.query_maps.resize(src.query_maps.size());
  dst.codebook_maps.resize(src.codebook_maps.size());
}
template <typename A, typename B>
void resize_like(EncoderParams<A>& dst, const EncoderParams<B>& src) {
  resize_like(dst.image_ggla, src.image_ggla);
  resize_like(dst.text_ggla, src.text_ggla);
}
template <typename A, typename B>
void resize_like(ModelParams<A>& dst, const ModelParams<B>& src) {
  resize_like(dst.encoder, src.encoder);
}
template <typename A, typename B>
void resize_like(A&, const B&) {}

/// Puts every parameter onto the tape, as variables or constants.
template <template <typename> class P, typename Scalar>
P<ad::Var<Scalar>> lift(ad::Graph<Scalar>& graph, const P<Mat<Scalar>>& src, bool trainable) {
  P<ad::Var<Scalar>> dst;
  resize_like(dst, src);
  P<Mat<Scalar>>::visit(
      [&](const std::string&, const Mat<Scalar>& m, ad::Var<Scalar>& v) {
        v = trainable ? graph.variable(m) : graph.constant(m);
      },
      "", src, dst);
  return dst;
}

/// A zero-filled copy with the same shapes.
template <template <typename> class P, typename Scalar>
P<Mat<Scalar>> zeros_like(const P<Mat<Scalar>>& src) {
  P<Mat<Scalar>> dst;
  resize_like(dst, src);
  P<Mat<Scalar>>::visit(
      [](const std::string&, const Mat<Scalar>& s, Mat<Scalar>& d) { d = Mat<Scalar>::Zero(s.rows(), s.cols()); },
      "", src, dst);
  return dst;
}

template <template <typename> class P, typename To, typename From>
P<Mat<To>> cast_params(const P<Mat<From>>& src) {
  P<Mat<To>> dst;
  resize_like(dst, src);
  P<Mat<From>>::visit(
      [](const std::string&, const Mat<From>& s, Mat<To>& d) { d = s.template cast<To>(); }, "", src, dst);
  return dst;
}

template <template <typename> class P, typename Scalar>
std::size_t count_params(const P<Mat<Scalar>>& p) {
  std::size_t n = 0;
  P<Mat<Scalar>>::visit([&](const std::string&, const Mat<Scalar>& m) { n += static_cast<std::size_t>(m.size()); },
                        "", p);
  return n;
}

struct ModelDims {
  Eigen::Index d_v = 64;
  Eigen::Index d_w = 64;
  Eigen::Index d_g = 32;
  Eigen::Index joint = 64;     // d
  std::size_t ggla_codes = 8;  // m
  Eigen::Index prototypes = 16;
};

namespace detail {

template <typename Scalar, typename Rng>
Mat<Scalar> glorot(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(rows + cols));
  std::normal_distribution<double> dist(0.0, stddev);
  Mat<Scalar> m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = static_cast<Scalar>(dist(rng));
  }
  return m;
}

template <typename Scalar, typename Rng>
Mat<Scalar> near_identity(Rng& rng, Eigen::Index d, double noise) {
  Mat<Scalar> m = Mat<Scalar>::Identity(d, d);
  std::normal_distribution<double> dist(0.0, noise / std::sqrt(static_cast<double>(d)));
  for (Eigen::Index i = 0; i < d; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) m(i, j) += static_cast<Scalar>(dist(rng));
  }
  return m;
}

}  // namespace detail

template <typename Scalar, typename Rng>
EncoderParams<Mat<Scalar>> init_encoder(const ModelDims& dims, Rng& rng) {
  using M = Mat<Scalar>;
  const auto d = dims.joint;
  EncoderParams<M> p;
  p.projection.region_w = detail::glorot<Scalar>(rng, dims.d_v, d);
  p.projection.region_b = M::Zero(1, d);
  p.projection.word_w = detail::glorot<Scalar>(rng, dims.d_w, d);
  p.projection.word_b = M::Zero(1, d);
  p.projection.image_global_w = detail::glorot<Scalar>(rng, dims.d_g, d);
  p.projection.image_global_b = M::Zero(1, d);
  p.projection.text_global_w = detail::glorot<Scalar>(rng, dims.d_g, d);
  p.projection.text_global_b = M::Zero(1, d);
  for (auto* e : {&p.image_enhancer, &p.text_enhancer}) {
    e->query = detail::glorot<Scalar>(rng, d, d);
    e->key = detail::glorot<Scalar>(rng, d, d);
    e->value = detail::glorot<Scalar>(rng, d, d);
    e->output = Scalar(0.1) * detail::glorot<Scalar>(rng, d, d);
  }
  for (auto* g : {&p.image_ggla, &p.text_ggla}) {
    for (std::size_t i = 0; i < dims.ggla_codes; ++i) {
      g->query_maps.push_back(detail::near_identity<Scalar>(rng, d, 0.5));
      g->codebook_maps.push_back(detail::near_identity<Scalar>(rng, d, 0.5));
    }
  }
  for (auto* f : {&p.image_fusion, &p.text_fusion}) {
    f->weight = Scalar(0.1) * detail::glorot<Scalar>(rng, 2 * d, 1);
    f->bias = M::Zero(1, 1);
  }
  return p;
}

template <typename Scalar, typename Rng>
GraphParams<Mat<Scalar>> init_graph(const ModelDims& dims, Rng& rng) {
  const auto d = dims.joint;
  GraphParams<Mat<Scalar>> p;
  p.intra_image = Scalar(0.5) * detail::glorot<Scalar>(rng, d, d);
  p.intra_text = Scalar(0.5) * detail::glorot<Scalar>(rng, d, d);
  p.joint = Scalar(0.5) * detail::glorot<Scalar>(rng, d, d);
  p.gat_query = detail::glorot<Scalar>(rng, d, d);
  p.gat_key = detail::glorot<Scalar>(rng, d, d);
  p.gat_value = Scalar(0.5) * detail::glorot<Scalar>(rng, d, d);
  return p;
}

template <typename Scalar, typename Rng>
Mat<Scalar> init_prototypes(const ModelDims& dims, Rng& rng) {
  Mat<Scalar> p = detail::glorot<Scalar>(rng, dims.prototypes, dims.joint);
  p.rowwise().normalize();
  return p;
}

template <typename Scalar, typename Rng>
ModelParams<Mat<Scalar>> init_model(const ModelDims& dims, Rng& rng) {
  ModelParams<Mat<Scalar>> p;
  p.encoder = init_encoder<Scalar>(dims, rng);
  p.prototypes = init_prototypes<Scalar>(dims, rng);
  p.graph = init_graph<Scalar>(dims, rng);
  return p;
}

}  // namespace aahr
