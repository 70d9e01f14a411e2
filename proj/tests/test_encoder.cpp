#include <aahr/encoder.hpp>

#include <gtest/gtest.h>

#include "support.hpp"

namespace {

using namespace aahr;
using namespace aahr::encoder;
using aahr::testing::gradient_error;
using aahr::testing::random_matrix;
using V = ad::Var<double>;
using G = ad::Graph<double>;

// ---------------------------------------------------------------------------
// Scalar-loop oracles

MatD oracle_affine(const MatD& x, const MatD& w, const MatD& b) {
  MatD out(x.rows(), w.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < w.cols(); ++j) {
      double s = b(0, j);
      for (Eigen::Index k = 0; k < x.cols(); ++k) s += x(i, k) * w(k, j);
      out(i, j) = s;
    }
  }
  return out;
}

MatD oracle_matmul(const MatD& a, const MatD& b) { return oracle_affine(a, b, MatD::Zero(1, b.cols())); }

std::vector<double> oracle_softmax(const std::vector<double>& z) {
  double mx = z[0];
  for (double v : z) mx = std::max(mx, v);
  double total = 0.0;
  std::vector<double> e;
  for (double v : z) {
    e.push_back(std::exp(v - mx));
    total += e.back();
  }
  for (double& v : e) v /= total;
  return e;
}

MatD oracle_enhance(const MatD& x, const EnhancerParams<MatD>& p) {
  const MatD q = oracle_matmul(x, p.query), k = oracle_matmul(x, p.key);
  const MatD vo = oracle_matmul(oracle_matmul(x, p.value), p.output);
  const double scale = 1.0 / std::sqrt(static_cast<double>(x.cols()));
  MatD out = x;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    std::vector<double> logits;
    for (Eigen::Index j = 0; j < x.rows(); ++j) {
      double s = 0.0;
      for (Eigen::Index c = 0; c < q.cols(); ++c) s += q(i, c) * k(j, c);
      logits.push_back(s * scale);
    }
    const auto att = oracle_softmax(logits);
    for (Eigen::Index j = 0; j < x.rows(); ++j) {
      for (Eigen::Index c = 0; c < x.cols(); ++c) out(i, c) += att[static_cast<std::size_t>(j)] * vo(j, c);
    }
  }
  return out;
}

double oracle_cosine(const MatD& a, Eigen::Index ra, const MatD& b, Eigen::Index rb) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (Eigen::Index c = 0; c < a.cols(); ++c) {
    dot += a(ra, c) * b(rb, c);
    na += a(ra, c) * a(ra, c);
    nb += b(rb, c) * b(rb, c);
  }
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

std::vector<double> oracle_ggla_weights(const MatD& query, const MatD& codebook, const GglaParams<MatD>& p) {
  std::vector<double> mean(static_cast<std::size_t>(codebook.rows()), 0.0);
  for (std::size_t k = 0; k < p.codes(); ++k) {
    const MatD q = oracle_matmul(query, p.query_maps[k]);
    const MatD c = oracle_matmul(codebook, p.codebook_maps[k]);
    for (Eigen::Index j = 0; j < codebook.rows(); ++j) {
      mean[static_cast<std::size_t>(j)] += oracle_cosine(q, 0, c, j) / static_cast<double>(p.codes());
    }
  }
  return oracle_softmax(mean);
}

MatD oracle_aggregate(const std::vector<double>& w, const MatD& locals) {
  MatD out = MatD::Zero(1, locals.cols());
  for (Eigen::Index j = 0; j < locals.rows(); ++j) {
    for (Eigen::Index c = 0; c < locals.cols(); ++c) out(0, c) += w[static_cast<std::size_t>(j)] * locals(j, c);
  }
  return out;
}

std::pair<MatD, double> oracle_fuse(const MatD& fine, const MatD& global, const FusionParams<MatD>& f) {
  const Eigen::Index d = fine.cols();
  double z = f.bias(0, 0);
  for (Eigen::Index c = 0; c < d; ++c) z += fine(0, c) * f.weight(c, 0) + global(0, c) * f.weight(d + c, 0);
  const double gate = 1.0 / (1.0 + std::exp(-z));
  MatD mixed(1, d);
  double norm = 0.0;
  for (Eigen::Index c = 0; c < d; ++c) {
    mixed(0, c) = gate * fine(0, c) + (1.0 - gate) * global(0, c);
    norm += mixed(0, c) * mixed(0, c);
  }
  return {mixed / std::sqrt(norm), gate};
}

// ---------------------------------------------------------------------------

ModelDims small_dims() {
  ModelDims d;
  d.d_v = 6;
  d.d_w = 5;
  d.d_g = 4;
  d.joint = 4;
  d.ggla_codes = 3;
  return d;
}

io::FeatureBundle random_bundle(std::mt19937_64& rng, const ModelDims& d, Eigen::Index n_r = 3, Eigen::Index n_t = 2) {
  io::FeatureBundle b;
  b.pair_id = "p";
  b.regions = random_matrix(rng, n_r, d.d_v).cast<float>();
  b.words = random_matrix(rng, n_t, d.d_w).cast<float>();
  b.global_image = random_matrix(rng, 1, d.d_g).cast<float>();
  b.global_text = random_matrix(rng, 1, d.d_g).cast<float>();
  return b;
}

EncoderParams<MatD> random_encoder(std::mt19937_64& rng, const ModelDims& d) {
  auto p = init_encoder<double>(d, rng);
  // Non-trivial biases and a live gate.
  p.projection.region_b = random_matrix(rng, 1, d.joint, 0.1);
  p.projection.word_b = random_matrix(rng, 1, d.joint, 0.1);
  p.image_fusion.weight = random_matrix(rng, 2 * d.joint, 1, 0.5);
  p.text_fusion.bias = random_matrix(rng, 1, 1, 0.5);
  p.image_enhancer.output = random_matrix(rng, d.joint, d.joint, 0.3);
  return p;
}

TEST(Projection, ZeroAndIdentity) {
  ModelDims d = small_dims();
  d.joint = d.d_v;
  std::mt19937_64 rng(1);
  auto p = init_encoder<double>(d, rng).projection;
  const auto b = random_bundle(rng, d);

  auto zero = p;
  ProjectionParams<MatD>::visit([](const std::string&, MatD& m) { m.setZero(); }, "", zero);
  io::FeatureBundle zb = b;
  zb.regions.setZero();
  EXPECT_EQ(project_bundle(zb, zero).regions, MatD::Zero(3, d.joint));

  p.region_w = MatD::Identity(d.d_v, d.joint);
  p.region_b.setZero();
  EXPECT_EQ(project_bundle(b, p).regions, b.regions.cast<double>());
}

TEST(Projection, MatchesScalarAffineOracle) {
  const ModelDims d = small_dims();
  std::mt19937_64 rng(2);
  const auto p = random_encoder(rng, d).projection;
  const auto b = random_bundle(rng, d);
  const auto out = project_bundle(b, p);
  EXPECT_LT((out.regions - oracle_affine(b.regions.cast<double>(), p.region_w, p.region_b)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((out.words - oracle_affine(b.words.cast<double>(), p.word_w, p.word_b)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((out.global_image - oracle_affine(b.global_image.cast<double>(), p.image_global_w, p.image_global_b))
                .cwiseAbs()
                .maxCoeff(),
            1e-12);
  EXPECT_LT((out.global_text - oracle_affine(b.global_text.cast<double>(), p.text_global_w, p.text_global_b))
                .cwiseAbs()
                .maxCoeff(),
            1e-12);
}

TEST(Enhancer, SingleNodeWithZeroUpdateIsIdentity) {
  std::mt19937_64 rng(3);
  EnhancerParams<MatD> e{random_matrix(rng, 4, 4), random_matrix(rng, 4, 4), MatD::Zero(4, 4), MatD::Zero(4, 4)};
  const MatD x = random_matrix(rng, 1, 4);
  EXPECT_EQ(enhance_locals(x, e), x);
}

TEST(Enhancer, AttentionRowsAreDistributions) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    G g;
    EnhancerParams<MatD> e{random_matrix(rng, 5, 5), random_matrix(rng, 5, 5), random_matrix(rng, 5, 5),
                           random_matrix(rng, 5, 5)};
    const auto out = enhance_locals_detailed(g.constant(random_matrix(rng, 7, 5, 2.0)), lift(g, e, false));
    EXPECT_LT((out.attention.value().rowwise().sum().array() - 1.0).abs().maxCoeff(), 1e-12);
  }
}

TEST(Enhancer, ScalarHandCase) {
  // n = 2, d = 1: scores x_i q x_j k, softmax per row, update att * x v o.
  const double a = 0.7, b = -1.2, q = 0.9, k = 1.3, v = 0.5, o = 2.0;
  EnhancerParams<MatD> e{MatD::Constant(1, 1, q), MatD::Constant(1, 1, k), MatD::Constant(1, 1, v),
                         MatD::Constant(1, 1, o)};
  MatD x(2, 1);
  x << a, b;
  auto row = [&](double xi) {
    const double s0 = xi * q * a * k, s1 = xi * q * b * k;
    const double w0 = std::exp(s0) / (std::exp(s0) + std::exp(s1));
    return xi + (w0 * a + (1.0 - w0) * b) * v * o;
  };
  const MatD out = enhance_locals(x, e);
  EXPECT_NEAR(out(0, 0), row(a), 1e-12);
  EXPECT_NEAR(out(1, 0), row(b), 1e-12);
}

TEST(Enhancer, MatchesLoopOracle) {
  std::mt19937_64 rng(5);
  EnhancerParams<MatD> e{random_matrix(rng, 6, 6), random_matrix(rng, 6, 6), random_matrix(rng, 6, 6),
                         random_matrix(rng, 6, 6)};
  const MatD x = random_matrix(rng, 4, 6);
  EXPECT_LT((enhance_locals(x, e) - oracle_enhance(x, e)).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Ggla, CoefficientsAreCosines) {
  MatD q(1, 3), c(2, 3);
  q << 1, 2, 3;
  c << 2, 4, 6, 3, 0, -1;
  const MatD out = ggla_coefficients(q, c);
  EXPECT_NEAR(out(0, 0), 1.0, 1e-12);
  EXPECT_NEAR(out(0, 1), 0.0, 1e-12);

  std::mt19937_64 rng(6);
  const MatD rq = random_matrix(rng, 1, 5), rc = random_matrix(rng, 3, 5);
  const MatD r = ggla_coefficients(rq, rc);
  for (Eigen::Index j = 0; j < 3; ++j) EXPECT_NEAR(r(0, j), oracle_cosine(rq, 0, rc, j), 1e-12);

  EXPECT_THROW(ggla_coefficients(MatD(MatD::Zero(1, 3)), c), NumericError);
}

TEST(Ggla, IdenticalCodewordsGiveUniformWeights) {
  std::mt19937_64 rng(7);
  const MatD row = random_matrix(rng, 1, 4);
  const MatD codebook = row.replicate(5, 1);
  GglaParams<MatD> p;
  for (int k = 0; k < 3; ++k) {
    p.query_maps.push_back(random_matrix(rng, 4, 4));
    p.codebook_maps.push_back(random_matrix(rng, 4, 4));
  }
  const MatD w = ggla_weights(random_matrix(rng, 1, 4), codebook, p);
  EXPECT_LT((w.array() - 0.2).abs().maxCoeff(), 1e-12);
}

TEST(Ggla, SingleIdentityTransformReducesToCosineSoftmax) {
  std::mt19937_64 rng(8);
  GglaParams<MatD> p{{MatD::Identity(4, 4)}, {MatD::Identity(4, 4)}};
  const MatD q = random_matrix(rng, 1, 4), c = random_matrix(rng, 6, 4);
  const MatD coeff = ggla_coefficients(q, c);
  const auto expected = oracle_softmax(std::vector<double>(coeff.data(), coeff.data() + coeff.size()));
  const MatD w = ggla_weights(q, c, p);
  for (Eigen::Index j = 0; j < 6; ++j) EXPECT_NEAR(w(0, j), expected[static_cast<std::size_t>(j)], 1e-12);
}

TEST(Ggla, EightTransformsMatchLoopOracle) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 10; ++trial) {
    GglaParams<MatD> p;
    for (int k = 0; k < 8; ++k) {
      p.query_maps.push_back(random_matrix(rng, 5, 5));
      p.codebook_maps.push_back(random_matrix(rng, 5, 5));
    }
    const MatD q = random_matrix(rng, 1, 5), c = random_matrix(rng, 7, 5);
    const auto expected = oracle_ggla_weights(q, c, p);
    const MatD w = ggla_weights(q, c, p);
    for (Eigen::Index j = 0; j < 7; ++j) EXPECT_NEAR(w(0, j), expected[static_cast<std::size_t>(j)], 1e-12);
    EXPECT_NEAR(w.sum(), 1.0, 1e-12);
  }
}

TEST(Ggla, AggregateSelectsAndAverages) {
  std::mt19937_64 rng(10);
  const MatD locals = random_matrix(rng, 4, 3);
  MatD onehot = MatD::Zero(1, 4);
  onehot(0, 2) = 1.0;
  EXPECT_EQ(ggla_aggregate(onehot, locals), locals.row(2));
  EXPECT_LT((ggla_aggregate(MatD(MatD::Constant(1, 4, 0.25)), locals) - locals.colwise().mean()).cwiseAbs().maxCoeff(),
            1e-12);
  const MatD w = random_matrix(rng, 1, 4);
  EXPECT_LT((ggla_aggregate(w, locals) - oracle_aggregate(std::vector<double>(w.data(), w.data() + 4), locals))
                .cwiseAbs()
                .maxCoeff(),
            1e-12);
}

TEST(Fusion, NeutralAndSaturatedGates) {
  std::mt19937_64 rng(11);
  const MatD fine = random_matrix(rng, 1, 4), global = random_matrix(rng, 1, 4);
  FusionParams<MatD> f{MatD::Zero(8, 1), MatD::Zero(1, 1)};
  const auto neutral = gated_fuse(fine, global, f);
  EXPECT_DOUBLE_EQ(neutral.gate, 0.5);
  EXPECT_LT((neutral.embedding - (0.5 * fine + 0.5 * global).normalized()).cwiseAbs().maxCoeff(), 1e-12);

  f.bias(0, 0) = 100.0;
  const auto saturated = gated_fuse(fine, global, f);
  EXPECT_NEAR(saturated.gate, 1.0, 1e-12);
  EXPECT_LT((saturated.embedding - fine.normalized()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Fusion, MatchesScalarOracleAndStaysConvex) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    const MatD fine = random_matrix(rng, 1, 5), global = random_matrix(rng, 1, 5);
    FusionParams<MatD> f{random_matrix(rng, 10, 1), random_matrix(rng, 1, 1)};
    const auto out = gated_fuse(fine, global, f);
    const auto [emb, gate] = oracle_fuse(fine, global, f);
    EXPECT_NEAR(out.gate, gate, 1e-12);
    EXPECT_LT((out.embedding - emb).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_GT(out.gate, 0.0);
    EXPECT_LT(out.gate, 1.0);
    for (Eigen::Index c = 0; c < 5; ++c) {
      EXPECT_GE(out.mixed(0, c), std::min(fine(0, c), global(0, c)) - 1e-12);
      EXPECT_LE(out.mixed(0, c), std::max(fine(0, c), global(0, c)) + 1e-12);
    }
  }
}

TEST(EncodePair, DeterministicAndUnitNorm) {
  const ModelDims d = small_dims();
  std::mt19937_64 rng(13);
  const auto params = random_encoder(rng, d);
  const auto pf = cast_params<EncoderParams, float>(params);
  for (int trial = 0; trial < 10; ++trial) {
    const auto b = random_bundle(rng, d, 1 + trial % 4, 1 + trial % 3);
    const auto first = encode_pair<float>(b, pf);
    const auto second = encode_pair<float>(b, pf);
    EXPECT_EQ(first.v, second.v);
    EXPECT_EQ(first.t, second.t);
    EXPECT_NEAR(first.v.norm(), 1.0f, 1e-5f);
    EXPECT_NEAR(first.t.norm(), 1.0f, 1e-5f);
  }
}

TEST(EncodePair, MatchesComposedOracle) {
  const ModelDims d = small_dims();
  std::mt19937_64 rng(14);
  const auto p = random_encoder(rng, d);
  const auto b = random_bundle(rng, d, 4, 3);
  const auto out = encode_pair<double>(b, p);

  auto side = [](const MatD& locals_in, const MatD& global_in, const MatD& lw, const MatD& lb, const MatD& gw,
                 const MatD& gb, const EnhancerParams<MatD>& e, const GglaParams<MatD>& gg, const FusionParams<MatD>& f) {
    const MatD locals = oracle_enhance(oracle_affine(locals_in, lw, lb), e);
    const MatD global = oracle_affine(global_in, gw, gb);
    const MatD fine = oracle_aggregate(oracle_ggla_weights(global, locals, gg), locals);
    return oracle_fuse(fine, global, f).first;
  };
  const MatD v = side(b.regions.cast<double>(), b.global_image.cast<double>(), p.projection.region_w,
                      p.projection.region_b, p.projection.image_global_w, p.projection.image_global_b,
                      p.image_enhancer, p.image_ggla, p.image_fusion);
  const MatD t = side(b.words.cast<double>(), b.global_text.cast<double>(), p.projection.word_w, p.projection.word_b,
                      p.projection.text_global_w, p.projection.text_global_b, p.text_enhancer, p.text_ggla,
                      p.text_fusion);
  EXPECT_LT((out.v - v).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LT((out.t - t).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_EQ(embed_image<double>(b, p), out.v);
  EXPECT_EQ(embed_text<double>(b, p), out.t);
}

// ---------------------------------------------------------------------------
// Gradient checks

TEST(EncoderGradients, Ggla) {
  std::mt19937_64 rng(15);
  for (int trial = 0; trial < 10; ++trial) {
    const MatD q = random_matrix(rng, 1, 4), c = random_matrix(rng, 5, 4), probe = random_matrix(rng, 1, 4);
    std::vector<MatD> inputs{q, c};
    for (int k = 0; k < 2; ++k) {
      inputs.push_back(random_matrix(rng, 4, 4));
      inputs.push_back(random_matrix(rng, 4, 4));
    }
    const double err = gradient_error(inputs, [&](G& g, const std::vector<V>& x) {
      GglaParams<V> p{{x[2], x[4]}, {x[3], x[5]}};
      const auto w = ggla_weights(x[0], x[1], p);
      return ad::sum(ad::cmul_const(ggla_aggregate(w, x[1]), probe));
    });
    EXPECT_LT(err, 1e-4) << "trial " << trial;
  }
}

TEST(EncoderGradients, GatedFusion) {
  std::mt19937_64 rng(16);
  for (int trial = 0; trial < 10; ++trial) {
    const MatD probe = random_matrix(rng, 1, 4);
    const double err = gradient_error(
        {random_matrix(rng, 1, 4), random_matrix(rng, 1, 4), random_matrix(rng, 8, 1), random_matrix(rng, 1, 1)},
        [&](G& g, const std::vector<V>& x) {
          return ad::sum(ad::cmul_const(gated_fuse(x[0], x[1], FusionParams<V>{x[2], x[3]}).embedding, probe));
        });
    EXPECT_LT(err, 1e-4) << "trial " << trial;
  }
}

TEST(EncoderGradients, Enhancer) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 10; ++trial) {
    const MatD probe = random_matrix(rng, 3, 4);
    std::vector<MatD> inputs{random_matrix(rng, 3, 4)};
    for (int k = 0; k < 4; ++k) inputs.push_back(random_matrix(rng, 4, 4, 0.7));
    const double err = gradient_error(inputs, [&](G& g, const std::vector<V>& x) {
      return ad::sum(ad::cmul_const(enhance_locals(x[0], EnhancerParams<V>{x[1], x[2], x[3], x[4]}), probe));
    });
    EXPECT_LT(err, 1e-4) << "trial " << trial;
  }
}

TEST(EncoderGradients, FullImageChainWrtAllParameters) {
  const ModelDims d = small_dims();
  std::mt19937_64 rng(18);
  for (int trial = 0; trial < 3; ++trial) {
    const auto p = random_encoder(rng, d);
    const auto b = random_bundle(rng, d);
    const MatD probe = random_matrix(rng, 1, d.joint);
    std::vector<MatD> inputs;
    std::vector<std::string> names;
    EncoderParams<MatD>::visit(
        [&](const std::string& name, const MatD& m) {
          inputs.push_back(m);
          names.push_back(name);
        },
        "", p);
    const double err = gradient_error(inputs, [&](G& g, const std::vector<V>& x) {
      EncoderParams<V> pv;
      resize_like(pv, p);
      std::size_t at = 0;
      EncoderParams<MatD>::visit([&](const std::string&, const MatD&, V& dst) { dst = x[at++]; }, "", p, pv);
      const auto img = encode_image(g, MatD(b.regions.cast<double>()), MatD(b.global_image.cast<double>()), pv);
      const auto txt = encode_text(g, MatD(b.words.cast<double>()), MatD(b.global_text.cast<double>()), pv);
      return ad::sum(ad::cmul_const(img.embedding + txt.embedding, probe));
    });
    EXPECT_LT(err, 1e-4) << "trial " << trial;
  }
}

}  // namespace
