#include <aahr/metrics.hpp>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <sstream>

namespace aahr::metrics {

void SimilarityMatrix::validate() const {
  if (static_cast<Eigen::Index>(positives.size()) != sims.rows()) {
    throw ShapeError("similarity matrix: " + std::to_string(sims.rows()) + " queries but " +
                     std::to_string(positives.size()) + " positive sets");
  }
  if (!sims.allFinite()) throw NumericError("similarity matrix: non-finite entries");
  for (std::size_t q = 0; q < positives.size(); ++q) {
    if (positives[q].empty()) throw ProtocolError("query " + std::to_string(q) + " has no positives");
    for (int g : positives[q]) {
      if (g < 0 || g >= sims.cols()) throw ShapeError("query " + std::to_string(q) + ": positive index out of range");
    }
  }
}

std::vector<int> positive_ranks(const Eigen::Ref<const Eigen::RowVectorXd>& row, const std::vector<int>& targets) {
  std::vector<int> ranks;
  ranks.reserve(targets.size());
  for (int p : targets) {
    const double s = row(p);
    int ahead = 0;
    for (Eigen::Index j = 0; j < row.size(); ++j) {
      if (row(j) > s || (row(j) == s && j < p)) ++ahead;
    }
    ranks.push_back(ahead + 1);
  }
  std::sort(ranks.begin(), ranks.end());
  return ranks;
}

std::vector<int> reference_ranking(const Eigen::Ref<const Eigen::RowVectorXd>& row) {
  std::vector<int> order(static_cast<std::size_t>(row.size()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return row(a) > row(b); });
  return order;
}

namespace {

std::vector<int> unique_sorted(std::vector<int> v) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  return v;
}

template <typename PerQuery>
double average_over_queries(const SimilarityMatrix& sm, PerQuery&& per_query) {
  sm.validate();
  if (sm.sims.rows() == 0) throw ProtocolError("no queries");
  double total = 0.0;
  for (Eigen::Index q = 0; q < sm.sims.rows(); ++q) {
    const auto targets = unique_sorted(sm.positives[static_cast<std::size_t>(q)]);
    total += per_query(positive_ranks(sm.sims.row(q), targets));
  }
  return 100.0 * total / static_cast<double>(sm.sims.rows());
}

}  // namespace

double recall_at_k(const SimilarityMatrix& sm, int k, RecallConvention convention) {
  if (k < 1 || k > sm.sims.cols()) {
    throw ConfigError("recall_at_k: K=" + std::to_string(k) + " outside [1, " + std::to_string(sm.sims.cols()) + "]");
  }
  return average_over_queries(sm, [k, convention](const std::vector<int>& ranks) {
    if (convention == RecallConvention::hit_rate) return ranks.front() <= k ? 1.0 : 0.0;
    const auto within = std::count_if(ranks.begin(), ranks.end(), [k](int r) { return r <= k; });
    return static_cast<double>(within) / static_cast<double>(ranks.size());
  });
}

double r_precision(const SimilarityMatrix& sm) {
  return average_over_queries(sm, [](const std::vector<int>& ranks) {
    const int r = static_cast<int>(ranks.size());
    const auto within = std::count_if(ranks.begin(), ranks.end(), [r](int x) { return x <= r; });
    return static_cast<double>(within) / static_cast<double>(r);
  });
}

double map_at_r(const SimilarityMatrix& sm) {
  return average_over_queries(sm, [](const std::vector<int>& ranks) {
    double ap = 0.0;
    for (std::size_t i = 0; i < ranks.size(); ++i) ap += static_cast<double>(i + 1) / static_cast<double>(ranks[i]);
    return ap / static_cast<double>(ranks.size());
  });
}

std::string to_string(Direction d) { return d == Direction::image_to_text ? "image_to_text" : "text_to_image"; }

double MetricsReport::recall_sum() const {
  double s = 0.0;
  for (const auto& [k, v] : r_at) s += v;
  return s;
}

MetricsReport report_for(const SimilarityMatrix& sm, Direction direction, RecallConvention convention) {
  MetricsReport r;
  r.direction = direction;
  for (int k : {1, 5, 10}) r.r_at[k] = recall_at_k(sm, std::min<int>(k, static_cast<int>(sm.sims.cols())), convention);
  r.r_p = r_precision(sm);
  r.map_at_r = map_at_r(sm);
  return r;
}

std::pair<SimilarityMatrix, SimilarityMatrix> directed_matrices(const MatF& image_embs, const MatF& text_embs,
                                                                const GroundTruth& gt) {
  if (gt.positives.empty()) throw ProtocolError("evaluate: empty ground truth");
  if (image_embs.rows() != static_cast<Eigen::Index>(gt.image_ids.size()) ||
      text_embs.rows() != static_cast<Eigen::Index>(gt.caption_ids.size())) {
    throw ShapeError("evaluate: embedding rows do not match ground-truth ids");
  }
  if (image_embs.cols() != text_embs.cols()) throw ShapeError("evaluate: embedding dims differ");

  std::map<std::string, int> caption_index;
  for (std::size_t j = 0; j < gt.caption_ids.size(); ++j) caption_index[gt.caption_ids[j]] = static_cast<int>(j);

  const MatF sims = image_embs * text_embs.transpose();
  SimilarityMatrix i2t{sims.cast<double>(), std::vector<std::vector<int>>(gt.image_ids.size())};
  SimilarityMatrix t2i{sims.transpose().cast<double>(), std::vector<std::vector<int>>(gt.caption_ids.size())};
  for (std::size_t i = 0; i < gt.image_ids.size(); ++i) {
    auto it = gt.positives.find(gt.image_ids[i]);
    if (it == gt.positives.end()) continue;
    for (const auto& cap : it->second) {
      auto c = caption_index.find(cap);
      if (c == caption_index.end()) continue;
      i2t.positives[i].push_back(c->second);
      t2i.positives[static_cast<std::size_t>(c->second)].push_back(static_cast<int>(i));
    }
  }
  return {std::move(i2t), std::move(t2i)};
}

Evaluation evaluate(const MatF& image_embs, const MatF& text_embs, const GroundTruth& gt,
                    RecallConvention convention) {
  const auto [i2t, t2i] = directed_matrices(image_embs, text_embs, gt);
  Evaluation e;
  e.image_to_text = report_for(i2t, Direction::image_to_text, convention);
  e.text_to_image = report_for(t2i, Direction::text_to_image, convention);
  e.rsum = e.image_to_text.recall_sum() + e.text_to_image.recall_sum();
  return e;
}

namespace {

nlohmann::ordered_json report_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  j["direction"] = to_string(r.direction);
  for (const auto& [k, v] : r.r_at) j["R@" + std::to_string(k)] = v;
  j["R-P"] = r.r_p;
  j["mAP@R"] = r.map_at_r;
  return j;
}

std::string fixed(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", v);
  return buf;
}

}  // namespace

std::string evaluation_to_json(const Evaluation& e) {
  nlohmann::ordered_json j;
  j["image_to_text"] = report_json(e.image_to_text);
  j["text_to_image"] = report_json(e.text_to_image);
  j["rsum"] = e.rsum;
  return j.dump(2) + "\n";
}

std::string format_table(const Evaluation& e) {
  std::ostringstream out;
  char line[256];
  std::snprintf(line, sizeof line, "%-22s %-22s %8s\n", "Image-to-Text", "Text-to-Image", "");
  out << line;
  std::snprintf(line, sizeof line, "%6s %6s %6s   %6s %6s %6s   %8s\n", "R@1", "R@5", "R@10", "R@1", "R@5", "R@10",
                "rSum");
  out << line;
  const auto& a = e.image_to_text.r_at;
  const auto& b = e.text_to_image.r_at;
  std::snprintf(line, sizeof line, "%6s %6s %6s   %6s %6s %6s   %8s\n", fixed(a.at(1)).c_str(), fixed(a.at(5)).c_str(),
                fixed(a.at(10)).c_str(), fixed(b.at(1)).c_str(), fixed(b.at(5)).c_str(), fixed(b.at(10)).c_str(),
                fixed(e.rsum).c_str());
  out << line << "\n";
  std::snprintf(line, sizeof line, "%-15s %8s %8s\n", "", "R-P", "mAP@R");
  out << line;
  std::snprintf(line, sizeof line, "%-15s %8s %8s\n", "Image-to-Text", fixed(e.image_to_text.r_p).c_str(),
                fixed(e.image_to_text.map_at_r).c_str());
  out << line;
  std::snprintf(line, sizeof line, "%-15s %8s %8s\n", "Text-to-Image", fixed(e.text_to_image.r_p).c_str(),
                fixed(e.text_to_image.map_at_r).c_str());
  out << line;
  std::snprintf(line, sizeof line, "rSum = %s\n", fixed(e.rsum).c_str());
  out << line;
  return out.str();
}

}  // namespace aahr::metrics
