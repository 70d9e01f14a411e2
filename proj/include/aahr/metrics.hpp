#pragma once

// Retrieval metrics with multi-positive ground truth: R@K, rSum, R-P and
// mAP@R.
//
// Ranking is by descending score with ties broken by the lower gallery
// index. R@K defaults to the query-level hit rate (a query scores if any of
// its positives is within the top K). The set-intersection variant
// |G n S_K| / |G| is available through RecallConvention::fraction; the two
// coincide for single-positive queries.

#include <aahr/types.hpp>

#include <map>
#include <set>
#include <string>
#include <vector>

namespace aahr::metrics {

struct SimilarityMatrix {
  MatD sims;                                  // queries x gallery
  std::vector<std::vector<int>> positives;    // per query, gallery indices

  void validate() const;
};

enum class RecallConvention { hit_rate, fraction };

/// Percent in [0, 100].
double recall_at_k(const SimilarityMatrix& sm, int k, RecallConvention convention = RecallConvention::hit_rate);
double r_precision(const SimilarityMatrix& sm);
double map_at_r(const SimilarityMatrix& sm);

/// 1-based ranks of `targets` in `row` under the tie rule, ascending.
std::vector<int> positive_ranks(const Eigen::Ref<const Eigen::RowVectorXd>& row, const std::vector<int>& targets);

/// Full gallery order for one query by a stable sort; the reference the
/// counting-based metrics are checked against.
std::vector<int> reference_ranking(const Eigen::Ref<const Eigen::RowVectorXd>& row);

enum class Direction { image_to_text, text_to_image };
std::string to_string(Direction d);

struct MetricsReport {
  Direction direction = Direction::image_to_text;
  std::map<int, double> r_at;  // K -> percent, K in {1, 5, 10}
  double r_p = 0.0;
  double map_at_r = 0.0;

  double recall_sum() const;
};

MetricsReport report_for(const SimilarityMatrix& sm, Direction direction,
                         RecallConvention convention = RecallConvention::hit_rate);

/// Many-to-many ground truth between image and caption ids.
struct GroundTruth {
  std::vector<std::string> image_ids;    // gallery/query order for images
  std::vector<std::string> caption_ids;  // gallery/query order for captions
  std::map<std::string, std::set<std::string>> positives;  // image -> captions
};

struct Evaluation {
  MetricsReport image_to_text;
  MetricsReport text_to_image;
  double rsum = 0.0;  // R@1 + R@5 + R@10 over both directions
};

/// Builds both directed similarity matrices from unit-norm embeddings (one
/// row per id, in GroundTruth order) and reports both directions.
Evaluation evaluate(const MatF& image_embs, const MatF& text_embs, const GroundTruth& gt,
                    RecallConvention convention = RecallConvention::hit_rate);

std::pair<SimilarityMatrix, SimilarityMatrix> directed_matrices(const MatF& image_embs, const MatF& text_embs,
                                                                const GroundTruth& gt);

std::string evaluation_to_json(const Evaluation& e);
/// Aligned text table: the six R@K values and rSum, then R-P and mAP@R.
std::string format_table(const Evaluation& e);

}  // namespace aahr::metrics
