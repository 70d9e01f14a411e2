#pragma once

// Training orchestration: one step computes
//
//   L = PGA(V, T) + MCL + NSI
//
// then backpropagates, applies AdamW, renormalizes prototypes, updates the
// momentum encoder and pushes the batch's momentum features into the banks,
// in that order.

#include <aahr/encoder.hpp>
#include <aahr/metrics.hpp>
#include <aahr/momentum.hpp>
#include <aahr/neighborhood.hpp>
#include <aahr/params.hpp>
#include <aahr/prototype.hpp>
#include <aahr/tensorio.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace aahr::trainer {

struct TrainConfig {
  std::string profile = "synthetic";
  std::string manifest;
  std::string output_dir = "run";
  std::string train_split = "train";

  int batch_size = 16;
  double learning_rate = 5e-4;
  int epochs = 30;
  double tau = 0.1;
  double gamma = 0.2;
  double alpha = 1.5;
  double epsilon_kernel = 1.0;
  double m_tilde = 0.999;
  int bank_size = 128;
  int num_prototypes = 16;
  int sinkhorn_iters = 3;
  double sinkhorn_eps = 0.05;
  std::uint64_t seed = 42;

  int joint_dim = 64;
  int ggla_codes = 8;
  double weight_decay = 1e-4;
  double warmup_fraction = 0.05;
  double dropout_gcn = 0.6;
  double dropout_gat = 0.1;
  int gat_heads = 1;

  bool use_pga = true;
  bool use_mcl = true;
  bool use_nsi = true;

  int checkpoint_every = 0;  // epochs; 0 writes only the final checkpoint

  void validate() const;
};

/// Built-in profiles: "synthetic" (desk scale), "flickr30k", "mscoco".
TrainConfig profile_config(const std::string& name);

/// Parses JSON whose keys match TrainConfig fields. A "profile" key selects
/// the base defaults. Unknown keys are rejected.
TrainConfig config_from_json(const std::string& text);
std::string config_to_json(const TrainConfig& c);

/// Reads a config file, or returns a built-in profile when `path_or_profile`
/// names one. AAHR_SEED in the environment overrides the seed.
TrainConfig load_config(const std::string& path_or_profile);

struct AdamState {
  ModelParams<MatF> first;
  ModelParams<MatF> second;
  std::int64_t step = 0;
};

struct TrainState {
  TrainConfig config;
  ModelDims dims;
  ModelParams<MatF> params;
  momentum::MomentumEncoder<float> momentum;
  AdamState adam;
  momentum::MemoryBank<float> image_bank;
  momentum::MemoryBank<float> text_bank;
  std::mt19937_64 rng;
  int epoch = 0;
  std::int64_t step = 0;
  /// Planned length of the run; sets the warmup span. Zero disables warmup.
  std::int64_t total_steps = 0;
};

TrainState init_state(const TrainConfig& config, const io::FeatureDims& features);

struct LossComponents {
  double pga = 0.0;
  double mcl = 0.0;
  double nsi = 0.0;
  double total = 0.0;
  // Breakdown of the terms above.
  double pga_image = 0.0, pga_text = 0.0;
  double mcl_image_to_text = 0.0, mcl_text_to_image = 0.0;
  double triplet_base = 0.0, triplet_enhanced = 0.0, triplet_base_image = 0.0, triplet_base_text = 0.0;
  double pga_enhanced = 0.0;

  std::map<std::string, double> as_map() const;
};

using Batch = std::vector<const io::FeatureBundle*>;

/// Loss of the current state on a batch without mutating anything. Dropout
/// draws from `dropout_rng` when given, otherwise it is disabled.
LossComponents compute_loss(const Batch& batch, const TrainState& state, std::mt19937_64* dropout_rng);

/// One optimizer step. Dropout draws from state.rng.
LossComponents train_step(const Batch& batch, TrainState& state);

double learning_rate_at(const TrainConfig& c, std::int64_t step, std::int64_t total_steps);

using StepLogger = std::function<void(const TrainState&, const LossComponents&)>;

/// Runs config.epochs epochs of seeded shuffled batches over `bundles`.
void run_epochs(TrainState& state, const std::vector<io::FeatureBundle>& bundles, const StepLogger& log = {},
                const std::function<void(const TrainState&)>& on_epoch = {});

/// Full run from a manifest: loads the train split, trains, writes
/// checkpoints under config.output_dir and a JSON line per step to
/// train_log.jsonl. Returns the final state.
TrainState train(const TrainConfig& config, const io::DatasetManifest& manifest);

void save_checkpoint(const TrainState& state, const std::filesystem::path& dir);
TrainState load_checkpoint(const std::filesystem::path& dir);

/// Base (non-enhanced) embeddings for a split. Images are deduplicated by
/// image_id; image and text sides are computed independently.
struct Embeddings {
  std::vector<std::string> image_ids;
  std::vector<std::string> caption_ids;
  MatF images;  // one unit row per image id
  MatF texts;   // one unit row per caption id
};

Embeddings embed(const ModelParams<MatF>& params, const io::DatasetManifest& manifest, const std::string& split);
void write_embeddings(const Embeddings& e, const std::filesystem::path& dir);
Embeddings read_embeddings(const std::filesystem::path& dir);

metrics::GroundTruth ground_truth_for(const Embeddings& e, const io::DatasetManifest& manifest);
metrics::Evaluation evaluate_embeddings(const Embeddings& e, const io::DatasetManifest& manifest);

}  // namespace aahr::trainer
