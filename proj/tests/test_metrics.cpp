#include <aahr/metrics.hpp>

#include <gtest/gtest.h>

#include <nlohmann/json.hpp>

#include "oracles.hpp"

namespace {

using namespace aahr;
using namespace aahr::metrics;

// One query whose single row of scores puts the given gallery items at the
// given 1-based ranks.
SimilarityMatrix ranked(int gallery, const std::vector<int>& positive_ranks) {
  SimilarityMatrix sm{MatD(1, gallery), {{}}};
  for (int g = 0; g < gallery; ++g) sm.sims(0, g) = static_cast<double>(gallery - g);  // item g sits at rank g + 1
  for (int r : positive_ranks) sm.positives[0].push_back(r - 1);
  return sm;
}

void expect_matches_oracle(const MatD& sims, const std::vector<std::vector<int>>& pos) {
  const SimilarityMatrix sm{sims, pos};
  const auto ref = oracle::retrieval(sims, pos);
  for (int k : {1, 2, 5, 10, static_cast<int>(sims.cols())}) {
    if (k > sims.cols()) continue;
    EXPECT_EQ(recall_at_k(sm, k), ref.recall[static_cast<std::size_t>(k - 1)]) << "K=" << k;
  }
  EXPECT_EQ(r_precision(sm), ref.r_precision);
  EXPECT_EQ(map_at_r(sm), ref.map_at_r);
}

TEST(Metrics, MapHandValues) {
  EXPECT_DOUBLE_EQ(map_at_r(ranked(5, {1})), 100.0);
  EXPECT_NEAR(map_at_r(ranked(5, {1, 3})), 100.0 * (1.0 + 2.0 / 3.0) / 2.0, 1e-12);
  EXPECT_NEAR(map_at_r(ranked(5, {1, 3})), 83.3333, 1e-4);
  EXPECT_DOUBLE_EQ(map_at_r(ranked(5, {2})), 50.0);
  EXPECT_DOUBLE_EQ(map_at_r(ranked(5, {1, 2, 3})), 100.0);
}

TEST(Metrics, RPrecisionHandValues) {
  EXPECT_DOUBLE_EQ(r_precision(ranked(5, {1, 2})), 100.0);
  EXPECT_DOUBLE_EQ(r_precision(ranked(5, {1, 3})), 50.0);
  EXPECT_DOUBLE_EQ(r_precision(ranked(5, {1})), 100.0);
  EXPECT_DOUBLE_EQ(r_precision(ranked(5, {4})), 0.0);
}

TEST(Metrics, RecallIdentityAndFullGallery) {
  const SimilarityMatrix sm{MatD::Identity(3, 3), {{0}, {1}, {2}}};
  EXPECT_DOUBLE_EQ(recall_at_k(sm, 1), 100.0);
  std::mt19937_64 rng(1);
  auto [sims, pos] = oracle::random_retrieval(rng, 20, 30, 3);
  EXPECT_DOUBLE_EQ(recall_at_k({sims, pos}, 30), 100.0);
}

TEST(Metrics, RecallConventionsAgreeForSinglePositives) {
  std::mt19937_64 rng(2);
  auto [sims, pos] = oracle::random_retrieval(rng, 40, 60, 1);
  for (int k : {1, 5, 10}) {
    EXPECT_EQ(recall_at_k({sims, pos}, k, RecallConvention::hit_rate),
              recall_at_k({sims, pos}, k, RecallConvention::fraction));
  }
  // Positives at ranks 1 and 3: a hit at K=1 but only half the set.
  EXPECT_DOUBLE_EQ(recall_at_k(ranked(5, {1, 3}), 1, RecallConvention::hit_rate), 100.0);
  EXPECT_DOUBLE_EQ(recall_at_k(ranked(5, {1, 3}), 1, RecallConvention::fraction), 50.0);
}

TEST(Metrics, TiesGoToTheLowerIndex) {
  SimilarityMatrix sm{MatD::Constant(1, 4, 0.5), {{2}}};
  EXPECT_DOUBLE_EQ(recall_at_k(sm, 2), 0.0);
  EXPECT_DOUBLE_EQ(recall_at_k(sm, 3), 100.0);
  EXPECT_EQ(reference_ranking(sm.sims.row(0)), (std::vector<int>{0, 1, 2, 3}));
  EXPECT_EQ(positive_ranks(sm.sims.row(0), {2}), std::vector<int>{3});
}

TEST(Metrics, MatchesFullSortOracle) {
  std::mt19937_64 rng(3);
  for (auto [q, g, p] : std::vector<std::tuple<int, int, int>>{{1, 1, 1}, {3, 7, 3}, {50, 250, 5}, {100, 500, 5}}) {
    for (int trial = 0; trial < 5; ++trial) {
      auto [sims, pos] = oracle::random_retrieval(rng, q, g, p);
      expect_matches_oracle(sims, pos);
    }
  }
}

TEST(Metrics, MatchesFullSortOracleAtLargestSize) {
  std::mt19937_64 rng(4);
  auto [sims, pos] = oracle::random_retrieval(rng, 500, 2500, 5);
  expect_matches_oracle(sims, pos);
}

TEST(Metrics, ReferenceRankingAgreesWithOracleSort) {
  std::mt19937_64 rng(5);
  auto [sims, pos] = oracle::random_retrieval(rng, 20, 100, 1);
  for (Eigen::Index q = 0; q < sims.rows(); ++q) EXPECT_EQ(reference_ranking(sims.row(q)), oracle::full_sort(sims, q));
}

TEST(Metrics, Properties) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 30; ++trial) {
    auto [sims, pos] = oracle::random_retrieval(rng, 15, 40, 4);
    const SimilarityMatrix sm{sims, pos};
    double prev = 0.0;
    for (int k = 1; k <= 40; ++k) {
      const double r = recall_at_k(sm, k);
      EXPECT_GE(r, prev);
      EXPECT_LE(r, 100.0);
      prev = r;
    }
    const double m = map_at_r(sm), rp = r_precision(sm);
    EXPECT_GE(m, 0.0);
    EXPECT_LE(m, 100.0);
    EXPECT_GE(rp, 0.0);
    EXPECT_LE(rp, 100.0);

    // Lifting every positive above the rest gives a perfect prefix.
    MatD lifted = sims;
    for (std::size_t qi = 0; qi < pos.size(); ++qi) {
      for (int g : pos[qi]) lifted(static_cast<Eigen::Index>(qi), g) += 10.0;
    }
    EXPECT_DOUBLE_EQ(map_at_r({lifted, pos}), 100.0);
    EXPECT_DOUBLE_EQ(r_precision({lifted, pos}), 100.0);
  }
}

TEST(Metrics, MapBelowHundredWithoutPrefix) {
  EXPECT_LT(map_at_r(ranked(6, {1, 2, 4})), 100.0);
}

TEST(Metrics, ErrorCases) {
  const SimilarityMatrix sm{MatD::Identity(2, 2), {{0}, {1}}};
  EXPECT_THROW(recall_at_k(sm, 0), ConfigError);
  EXPECT_THROW(recall_at_k(sm, 3), ConfigError);
  EXPECT_THROW(map_at_r({MatD::Identity(2, 2), {{0}, {}}}), ProtocolError);
  EXPECT_THROW(map_at_r({MatD::Identity(2, 2), {{0}}}), ShapeError);
  EXPECT_THROW(map_at_r({MatD::Identity(2, 2), {{0}, {5}}}), ShapeError);
  MatD bad = MatD::Identity(2, 2);
  bad(0, 1) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(map_at_r({bad, {{0}, {1}}}), NumericError);
  EXPECT_THROW(evaluate(MatF::Identity(2, 2), MatF::Identity(2, 2), GroundTruth{{"a", "b"}, {"x", "y"}, {}}),
               ProtocolError);
}

GroundTruth two_by_two() {
  return GroundTruth{{"i0", "i1"}, {"c0", "c1"}, {{"i0", {"c0"}}, {"i1", {"c1"}}}};
}

TEST(Evaluate, PerfectRetrievalGivesSixHundred) {
  const auto e = evaluate(MatF::Identity(2, 2), MatF::Identity(2, 2), two_by_two());
  EXPECT_DOUBLE_EQ(e.rsum, 600.0);
  EXPECT_DOUBLE_EQ(e.rsum, e.image_to_text.recall_sum() + e.text_to_image.recall_sum());
  EXPECT_NE(format_table(e).find("rSum = 600.0"), std::string::npos);
  const auto j = nlohmann::json::parse(evaluation_to_json(e));
  EXPECT_DOUBLE_EQ(j["rsum"].get<double>(), 600.0);
  EXPECT_DOUBLE_EQ(j["image_to_text"]["R@10"].get<double>(), 100.0);
  EXPECT_DOUBLE_EQ(j["text_to_image"]["mAP@R"].get<double>(), 100.0);
}

TEST(Evaluate, MultiCaptionImagesCountAnyCaption) {
  // Image 0 owns captions 0-1, image 1 owns captions 2-3.
  GroundTruth gt{{"a", "b"}, {"a0", "a1", "b0", "b1"}, {{"a", {"a0", "a1"}}, {"b", {"b0", "b1"}}}};
  MatF imgs = MatF::Identity(2, 3);
  MatF caps(4, 3);
  caps << 0, 0, 1,  // a0 is orthogonal to everything
      1, 0, 0,      // a1 matches a
      0, 1, 0,      // b0 matches b
      0, 0.6f, 0.8f;
  const auto e = evaluate(imgs, caps, gt);
  EXPECT_DOUBLE_EQ(e.image_to_text.r_at.at(1), 100.0);
  // Caption a0 ties at zero with both images and falls back to index 0: a hit.
  EXPECT_DOUBLE_EQ(e.text_to_image.r_at.at(1), 100.0);
  // a ranks a1 then a0 (tie at zero, lower index); b ranks b0 then b1.
  EXPECT_DOUBLE_EQ(e.image_to_text.r_p, 100.0);
}

TEST(Evaluate, QueryPermutationInvariance) {
  std::mt19937_64 rng(7);
  std::normal_distribution<float> n(0.f, 1.f);
  const int m = 12;
  MatF imgs(m, 6), caps(m, 6);
  for (Eigen::Index i = 0; i < imgs.size(); ++i) imgs.data()[i] = n(rng), caps.data()[i] = n(rng);
  imgs.rowwise().normalize();
  caps.rowwise().normalize();
  GroundTruth gt;
  for (int i = 0; i < m; ++i) {
    gt.image_ids.push_back("i" + std::to_string(i));
    gt.caption_ids.push_back("c" + std::to_string(i));
    gt.positives[gt.image_ids.back()] = {gt.caption_ids.back()};
  }
  const auto base = evaluate(imgs, caps, gt);

  std::vector<int> perm(m);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  GroundTruth pgt = gt;
  MatF pimgs(m, 6);
  for (int i = 0; i < m; ++i) {
    pgt.image_ids[static_cast<std::size_t>(i)] = gt.image_ids[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
    pimgs.row(i) = imgs.row(perm[static_cast<std::size_t>(i)]);
  }
  // Permuting queries leaves the caption gallery order, hence the i2t report, unchanged.
  const auto moved = evaluate(pimgs, caps, pgt);
  EXPECT_EQ(moved.image_to_text.r_at, base.image_to_text.r_at);
  EXPECT_EQ(moved.image_to_text.r_p, base.image_to_text.r_p);
  EXPECT_EQ(moved.image_to_text.map_at_r, base.image_to_text.map_at_r);
}

}  // namespace
