#include <aahr/trainer.hpp>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace aahr::trainer {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using Var = ad::Var<float>;

// ---------------------------------------------------------------------------
// Configuration

void TrainConfig::validate() const {
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(std::string("config: ") + name + " must be > 0");
  };
  if (batch_size < 2) throw ConfigError("config: batch_size must be >= 2");
  positive(learning_rate, "learning_rate");
  if (epochs < 0) throw ConfigError("config: epochs must be >= 0");
  positive(tau, "tau");
  if (!(gamma >= 0.0)) throw ConfigError("config: gamma must be >= 0");
  positive(alpha, "alpha");
  positive(epsilon_kernel, "epsilon_kernel");
  if (!(m_tilde >= 0.0 && m_tilde <= 1.0)) throw ConfigError("config: m_tilde must be in [0, 1]");
  if (bank_size < batch_size) throw ConfigError("config: bank_size must be >= batch_size");
  if (num_prototypes < 2) throw ConfigError("config: num_prototypes must be >= 2");
  if (sinkhorn_iters < 1) throw ConfigError("config: sinkhorn_iters must be >= 1");
  positive(sinkhorn_eps, "sinkhorn_eps");
  if (joint_dim < 1) throw ConfigError("config: joint_dim must be >= 1");
  if (ggla_codes < 1) throw ConfigError("config: ggla_codes must be >= 1");
  if (!(weight_decay >= 0.0)) throw ConfigError("config: weight_decay must be >= 0");
  if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) throw ConfigError("config: warmup_fraction in [0, 1)");
  if (!(dropout_gcn >= 0.0 && dropout_gcn < 1.0)) throw ConfigError("config: dropout_gcn in [0, 1)");
  if (!(dropout_gat >= 0.0 && dropout_gat < 1.0)) throw ConfigError("config: dropout_gat in [0, 1)");
  if (gat_heads < 1 || joint_dim % gat_heads != 0) throw ConfigError("config: gat_heads must divide joint_dim");
  if (checkpoint_every < 0) throw ConfigError("config: checkpoint_every must be >= 0");
}

TrainConfig profile_config(const std::string& name) {
  TrainConfig c;
  c.profile = name;
  if (name == "synthetic") return c;
  if (name == "flickr30k") {
    c.batch_size = 128;
    c.joint_dim = 1024;
    c.bank_size = 2048;
    c.num_prototypes = 384;
    return c;
  }
  if (name == "mscoco" || name == "eccv") {
    c.batch_size = 256;
    c.joint_dim = 1024;
    c.bank_size = 4096;
    c.num_prototypes = 768;
    return c;
  }
  throw ConfigError("unknown profile '" + name + "'");
}

namespace {

// One table drives parsing and serialization.
template <typename F>
void config_fields(TrainConfig& c, F&& f) {
  f("profile", c.profile);
  f("manifest", c.manifest);
  f("output_dir", c.output_dir);
  f("train_split", c.train_split);
  f("batch_size", c.batch_size);
  f("learning_rate", c.learning_rate);
  f("epochs", c.epochs);
  f("tau", c.tau);
  f("gamma", c.gamma);
  f("alpha", c.alpha);
  f("epsilon_kernel", c.epsilon_kernel);
  f("m_tilde", c.m_tilde);
  f("bank_size", c.bank_size);
  f("num_prototypes", c.num_prototypes);
  f("sinkhorn_iters", c.sinkhorn_iters);
  f("sinkhorn_eps", c.sinkhorn_eps);
  f("seed", c.seed);
  f("joint_dim", c.joint_dim);
  f("ggla_codes", c.ggla_codes);
  f("weight_decay", c.weight_decay);
  f("warmup_fraction", c.warmup_fraction);
  f("dropout_gcn", c.dropout_gcn);
  f("dropout_gat", c.dropout_gat);
  f("gat_heads", c.gat_heads);
  f("use_pga", c.use_pga);
  f("use_mcl", c.use_mcl);
  f("use_nsi", c.use_nsi);
  f("checkpoint_every", c.checkpoint_every);
}

}  // namespace

TrainConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  TrainConfig c = profile_config(j.value("profile", std::string("synthetic")));
  std::set<std::string> known;
  config_fields(c, [&](const char* key, auto& field) {
    known.insert(key);
    if (!j.contains(key)) return;
    try {
      field = j.at(key).get<std::decay_t<decltype(field)>>();
    } catch (const json::exception& e) {
      throw ConfigError(std::string("config: field '") + key + "': " + e.what());
    }
  });
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ConfigError("config: unknown key '" + key + "'");
  }
  c.validate();
  return c;
}

std::string config_to_json(const TrainConfig& c) {
  json j;
  TrainConfig copy = c;
  config_fields(copy, [&](const char* key, auto& field) { j[key] = field; });
  return j.dump(2) + "\n";
}

TrainConfig load_config(const std::string& path_or_profile) {
  TrainConfig c;
  if (fs::exists(path_or_profile)) {
    std::ifstream in(path_or_profile, std::ios::binary);
    if (!in) throw FileError(path_or_profile, "cannot open config");
    std::stringstream ss;
    ss << in.rdbuf();
    c = config_from_json(ss.str());
  } else if (path_or_profile == "synthetic" || path_or_profile == "flickr30k" || path_or_profile == "mscoco" ||
             path_or_profile == "eccv") {
    c = profile_config(path_or_profile);
  } else {
    throw FileError(path_or_profile, "config file not found");
  }
  if (const char* seed = std::getenv("AAHR_SEED"); seed != nullptr && *seed != '\0') {
    try {
      std::size_t used = 0;
      c.seed = std::stoull(seed, &used);
      if (used != std::string(seed).size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw ConfigError(std::string("AAHR_SEED is not an unsigned integer: ") + seed);
    }
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// State

namespace {

ModelDims dims_for(const TrainConfig& c, const io::FeatureDims& f) {
  ModelDims d;
  d.d_v = f.d_v;
  d.d_w = f.d_w;
  d.d_g = f.d_g;
  d.joint = c.joint_dim;
  d.ggla_codes = static_cast<std::size_t>(c.ggla_codes);
  d.prototypes = c.num_prototypes;
  return d;
}

}  // namespace

TrainState init_state(const TrainConfig& config, const io::FeatureDims& features) {
  config.validate();
  TrainState s;
  s.config = config;
  s.dims = dims_for(config, features);
  s.rng.seed(config.seed);
  s.params = init_model<float>(s.dims, s.rng);
  s.momentum.params = s.params.encoder;
  s.momentum.coefficient = static_cast<float>(config.m_tilde);
  s.adam.first = zeros_like(s.params);
  s.adam.second = zeros_like(s.params);
  s.image_bank = momentum::MemoryBank<float>(config.bank_size, config.joint_dim);
  s.text_bank = momentum::MemoryBank<float>(config.bank_size, config.joint_dim);
  return s;
}

std::map<std::string, double> LossComponents::as_map() const {
  return {{"total", total},
          {"pga", pga},
          {"mcl", mcl},
          {"nsi", nsi},
          {"pga_image", pga_image},
          {"pga_text", pga_text},
          {"mcl_image_to_text", mcl_image_to_text},
          {"mcl_text_to_image", mcl_text_to_image},
          {"triplet_base", triplet_base},
          {"triplet_enhanced", triplet_enhanced},
          {"triplet_base_image", triplet_base_image},
          {"triplet_base_text", triplet_base_text},
          {"pga_enhanced", pga_enhanced}};
}

// ---------------------------------------------------------------------------
// Loss

namespace {

struct MomentumFeatures {
  MatF images, texts;
};

MomentumFeatures momentum_features(const Batch& batch, const EncoderParams<MatF>& shadow) {
  const Eigen::Index m = static_cast<Eigen::Index>(batch.size());
  MomentumFeatures out;
  for (Eigen::Index i = 0; i < m; ++i) {
    const MatF v = encoder::embed_image<float>(*batch[static_cast<std::size_t>(i)], shadow);
    const MatF t = encoder::embed_text<float>(*batch[static_cast<std::size_t>(i)], shadow);
    if (i == 0) {
      out.images.resize(m, v.cols());
      out.texts.resize(m, t.cols());
    }
    out.images.row(i) = v;
    out.texts.row(i) = t;
  }
  return out;
}

double scalar(const Var& v) { return static_cast<double>(v.scalar()); }

struct LossGraph {
  Var total;
  LossComponents components;
  MomentumFeatures momentum;
};

LossGraph build_loss(ad::Graph<float>& g, const ModelParams<Var>& p, const Batch& batch, const TrainState& state,
                     std::mt19937_64* dropout_rng) {
  const auto& c = state.config;
  if (batch.size() < 2) throw ConfigError("train_step: batch size must be >= 2");
  const float tau = static_cast<float>(c.tau);
  const float gamma = static_cast<float>(c.gamma);
  const prototype::SinkhornConfig sinkhorn{c.sinkhorn_iters, c.sinkhorn_eps};

  std::vector<Var> images, texts;
  std::vector<MatF> image_locals, text_locals;
  for (const auto* b : batch) {
    const auto img = encoder::encode_image(g, b->regions, b->global_image, p.encoder);
    const auto txt = encoder::encode_text(g, b->words, b->global_text, p.encoder);
    images.push_back(img.embedding);
    texts.push_back(txt.embedding);
    image_locals.push_back(img.locals.value());
    text_locals.push_back(txt.locals.value());
  }
  const auto v = ad::vstack(images);
  const auto t = ad::vstack(texts);

  LossGraph out;
  LossComponents& lc = out.components;
  std::vector<Var> terms;

  if (c.use_pga) {
    const auto u_v = prototype::prototype_scores(v, p.prototypes);
    const auto u_t = prototype::prototype_scores(t, p.prototypes);
    const auto pga = prototype::pga_loss_terms(u_v, u_t, prototype::sinkhorn_assign(u_v.value(), sinkhorn),
                                               prototype::sinkhorn_assign(u_t.value(), sinkhorn), tau);
    lc.pga_image = scalar(pga.image);
    lc.pga_text = scalar(pga.text);
    lc.pga = scalar(pga.total);
    terms.push_back(pga.total);
  }

  out.momentum = momentum_features(batch, state.momentum.params);
  if (c.use_mcl) {
    const auto mcl = momentum::mcl_loss_terms(v, t, out.momentum.images, out.momentum.texts, state.image_bank,
                                              state.text_bank, tau);
    lc.mcl_image_to_text = scalar(mcl.image_to_text);
    lc.mcl_text_to_image = scalar(mcl.text_to_image);
    lc.mcl = scalar(mcl.total);
    terms.push_back(mcl.total);
  }

  if (c.use_nsi) {
    neighborhood::InteractionConfig icfg{c.epsilon_kernel, c.alpha, c.dropout_gcn, c.dropout_gat, c.gat_heads};
    const auto inter = neighborhood::interact(v, t, image_locals, text_locals, p.graph, icfg, dropout_rng);
    const auto nsi =
        neighborhood::nsi_loss(v, t, inter.gat.images, inter.gat.texts, p.prototypes, gamma, tau, sinkhorn);
    lc.triplet_base = scalar(nsi.base);
    lc.triplet_enhanced = scalar(nsi.enhanced);
    lc.triplet_base_image = scalar(nsi.base_image);
    lc.triplet_base_text = scalar(nsi.base_text);
    lc.pga_enhanced = scalar(nsi.enhanced_pga);
    lc.nsi = scalar(nsi.total);
    terms.push_back(nsi.total);
  } else {
    // Without the neighborhood branch the base triplet term still drives
    // the embedding; this is the triplet-only ablation when PGA and MCL are
    // off as well.
    const auto tri = neighborhood::triplet_on(v, t, gamma);
    lc.triplet_base = scalar(tri);
    lc.nsi = lc.triplet_base;
    terms.push_back(tri);
  }

  out.total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) out.total = out.total + terms[i];
  lc.total = scalar(out.total);
  return out;
}

void require_finite_loss(const LossComponents& lc) {
  for (const auto& [name, value] : lc.as_map()) {
    if (!std::isfinite(value)) {
      std::ostringstream msg;
      msg << "non-finite loss (" << name << ");";
      for (const auto& [n, v] : lc.as_map()) msg << ' ' << n << '=' << v;
      throw TrainingError(msg.str());
    }
  }
}

}  // namespace

LossComponents compute_loss(const Batch& batch, const TrainState& state, std::mt19937_64* dropout_rng) {
  ad::Graph<float> g;
  const auto p = lift(g, state.params, false);
  return build_loss(g, p, batch, state, dropout_rng).components;
}

double learning_rate_at(const TrainConfig& c, std::int64_t step, std::int64_t total_steps) {
  const auto warmup = static_cast<std::int64_t>(std::floor(c.warmup_fraction * static_cast<double>(total_steps)));
  if (warmup <= 0 || step >= warmup) return c.learning_rate;
  return c.learning_rate * static_cast<double>(step + 1) / static_cast<double>(warmup);
}

namespace {

std::int64_t steps_per_epoch(std::size_t n, int batch_size) {
  const auto b = static_cast<std::size_t>(batch_size);
  return static_cast<std::int64_t>(n / b + (n % b >= 2 ? 1 : 0));
}

void adamw_step(TrainState& s, const ModelParams<MatF>& grads, double lr) {
  constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  s.adam.step += 1;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(s.adam.step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(s.adam.step));
  const double wd = s.config.weight_decay;
  ModelParams<MatF>::visit(
      [&](const std::string&, MatF& p, const MatF& g, MatF& m, MatF& v) {
        m = static_cast<float>(beta1) * m + static_cast<float>(1.0 - beta1) * g;
        v = static_cast<float>(beta2) * v + static_cast<float>(1.0 - beta2) * g.cwiseAbs2();
        const auto m_hat = m.array() / static_cast<float>(bc1);
        const auto v_hat = v.array() / static_cast<float>(bc2);
        p.array() -= static_cast<float>(lr) * (m_hat / (v_hat.sqrt() + static_cast<float>(eps)) +
                                               static_cast<float>(wd) * p.array());
      },
      "", s.params, grads, s.adam.first, s.adam.second);
}

}  // namespace

LossComponents train_step(const Batch& batch, TrainState& state) {
  ad::Graph<float> g;
  const auto p = lift(g, state.params, true);
  std::optional<LossGraph> built;
  try {
    built.emplace(build_loss(g, p, batch, state, &state.rng));
  } catch (const NumericError& e) {
    // Non-finite values surfaced inside the forward pass (e.g. Sinkhorn input).
    throw TrainingError(std::string("non-finite forward pass at step ") + std::to_string(state.step) + ": " + e.what());
  }
  const LossGraph& loss = *built;
  require_finite_loss(loss.components);
  g.backward(loss.total);

  ModelParams<MatF> grads = zeros_like(state.params);
  ModelParams<MatF>::visit(
      [](const std::string&, const Var& v, MatF& grad) {
        if (v.grad().size() != 0) grad = v.grad();
      },
      "", p, grads);

  adamw_step(state, grads, learning_rate_at(state.config, state.step, state.total_steps));
  prototype::renormalize_prototypes(state.params.prototypes);
  momentum::momentum_update(state.params.encoder, state.momentum);
  state.image_bank.push(loss.momentum.images);
  state.text_bank.push(loss.momentum.texts);
  state.step += 1;
  return loss.components;
}

// ---------------------------------------------------------------------------
// Loop

void run_epochs(TrainState& state, const std::vector<io::FeatureBundle>& bundles, const StepLogger& log,
                const std::function<void(const TrainState&)>& on_epoch) {
  const auto& c = state.config;
  if (bundles.size() < 2) throw DatasetError("training needs at least two pairs");
  const std::int64_t per_epoch = steps_per_epoch(bundles.size(), c.batch_size);
  state.total_steps = per_epoch * c.epochs;
  std::vector<std::size_t> order(bundles.size());
  while (state.epoch < c.epochs) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), state.rng);
    for (std::int64_t b = 0; b < per_epoch; ++b) {
      const std::size_t begin = static_cast<std::size_t>(b) * static_cast<std::size_t>(c.batch_size);
      const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(c.batch_size));
      Batch batch;
      for (std::size_t i = begin; i < end; ++i) batch.push_back(&bundles[order[i]]);
      const auto lc = train_step(batch, state);
      if (log) log(state, lc);
    }
    state.epoch += 1;
    if (on_epoch) on_epoch(state);
  }
}

TrainState train(const TrainConfig& config, const io::DatasetManifest& manifest) {
  const auto pairs = manifest.split(config.train_split);
  if (pairs.empty()) throw DatasetError("no pairs in split '" + config.train_split + "'");
  const auto bundles = io::read_bundles(manifest, pairs);
  TrainState state = init_state(config, manifest.dims);
  const fs::path out = config.output_dir;
  fs::create_directories(out);
  std::ofstream log(out / "train_log.jsonl", std::ios::binary | std::ios::trunc);
  if (!log) throw FileError((out / "train_log.jsonl").string(), "cannot open for writing");
  run_epochs(
      state, bundles,
      [&log](const TrainState& s, const LossComponents& lc) {
        json j;
        j["epoch"] = s.epoch;
        j["step"] = s.step;
        for (const auto& [k, v] : lc.as_map()) j[k] = v;
        log << j.dump() << '\n';
      },
      [&out, &config](const TrainState& s) {
        if (config.checkpoint_every > 0 && s.epoch % config.checkpoint_every == 0 && s.epoch < config.epochs) {
          save_checkpoint(s, out / ("checkpoint_epoch_" + std::to_string(s.epoch)));
        }
      });
  save_checkpoint(state, out / "checkpoint");
  return state;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

std::string file_name(const std::string& param) { return param + ".aahr"; }

template <typename P>
void save_params(const P& params, const fs::path& dir) {
  fs::create_directories(dir);
  P::visit([&](const std::string& name, const MatF& m) { io::write_matrix(m, dir / file_name(name)); }, "", params);
}

template <typename P>
void load_params(P& params, const fs::path& dir) {
  P::visit(
      [&](const std::string& name, MatF& m) {
        const fs::path path = dir / file_name(name);
        if (!fs::exists(path)) throw FileError(path.string(), "missing parameter file");
        MatF loaded = io::read_matrix(path);
        if (loaded.rows() != m.rows() || loaded.cols() != m.cols()) {
          throw FormatError(path.string() + ": expected " + shape_of(m) + ", got " + shape_of(loaded));
        }
        m = std::move(loaded);
      },
      "", params);
}

std::string rng_state(const std::mt19937_64& rng) {
  std::ostringstream s;
  s << rng;
  return s.str();
}

}  // namespace

void save_checkpoint(const TrainState& state, const fs::path& dir) {
  fs::create_directories(dir);
  save_params(state.params, dir / "params");
  save_params(state.momentum.params, dir / "momentum");
  save_params(state.adam.first, dir / "optimizer" / "first");
  save_params(state.adam.second, dir / "optimizer" / "second");
  fs::create_directories(dir / "bank");
  io::write_matrix(state.image_bank.buffer(), dir / "bank" / "image.aahr");
  io::write_matrix(state.text_bank.buffer(), dir / "bank" / "text.aahr");

  json j;
  j["format"] = "aahr-checkpoint";
  j["version"] = 1;
  j["epoch"] = state.epoch;
  j["step"] = state.step;
  j["total_steps"] = state.total_steps;
  j["adam_step"] = state.adam.step;
  j["features"] = {{"d_v", state.dims.d_v}, {"d_w", state.dims.d_w}, {"d_g", state.dims.d_g}};
  j["bank"] = {{"image_write", state.image_bank.write_index()},
               {"image_filled", state.image_bank.filled()},
               {"text_write", state.text_bank.write_index()},
               {"text_filled", state.text_bank.filled()}};
  j["rng"] = rng_state(state.rng);
  j["config"] = json::parse(config_to_json(state.config));
  std::ofstream out(dir / "state.json", std::ios::binary | std::ios::trunc);
  if (!out) throw FileError((dir / "state.json").string(), "cannot open for writing");
  out << j.dump(2) << '\n';
  if (!out) throw FileError((dir / "state.json").string(), "write failed");
}

TrainState load_checkpoint(const fs::path& dir) {
  const fs::path state_path = dir / "state.json";
  std::ifstream in(state_path, std::ios::binary);
  if (!in) throw FileError(state_path.string(), "cannot open checkpoint state");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(state_path.string() + ": " + e.what());
  }
  try {
    if (j.at("format") != "aahr-checkpoint") throw FormatError(state_path.string() + ": not a checkpoint");
    const TrainConfig config = config_from_json(j.at("config").dump());
    io::FeatureDims features{j.at("features").at("d_v").get<std::uint32_t>(),
                             j.at("features").at("d_w").get<std::uint32_t>(),
                             j.at("features").at("d_g").get<std::uint32_t>()};
    TrainState s = init_state(config, features);
    load_params(s.params, dir / "params");
    load_params(s.momentum.params, dir / "momentum");
    load_params(s.adam.first, dir / "optimizer" / "first");
    load_params(s.adam.second, dir / "optimizer" / "second");
    const auto& bank = j.at("bank");
    MatF image_buffer = io::read_matrix(dir / "bank" / "image.aahr");
    MatF text_buffer = io::read_matrix(dir / "bank" / "text.aahr");
    if (image_buffer.rows() != config.bank_size || text_buffer.rows() != config.bank_size) {
      throw FormatError(dir.string() + ": bank capacity differs from config");
    }
    s.image_bank.restore(std::move(image_buffer), bank.at("image_write").get<Eigen::Index>(),
                         bank.at("image_filled").get<Eigen::Index>());
    s.text_bank.restore(std::move(text_buffer), bank.at("text_write").get<Eigen::Index>(),
                        bank.at("text_filled").get<Eigen::Index>());
    s.epoch = j.at("epoch").get<int>();
    s.step = j.at("step").get<std::int64_t>();
    s.total_steps = j.at("total_steps").get<std::int64_t>();
    s.adam.step = j.at("adam_step").get<std::int64_t>();
    std::istringstream rng(j.at("rng").get<std::string>());
    rng >> s.rng;
    if (!rng) throw FormatError(state_path.string() + ": bad rng state");
    return s;
  } catch (const json::exception& e) {
    throw FormatError(state_path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Inference

Embeddings embed(const ModelParams<MatF>& params, const io::DatasetManifest& manifest, const std::string& split) {
  const auto pairs = manifest.split(split);
  if (pairs.empty()) throw DatasetError("no pairs in split '" + split + "'");
  if (params.encoder.projection.region_w.rows() != manifest.dims.d_v ||
      params.encoder.projection.word_w.rows() != manifest.dims.d_w ||
      params.encoder.projection.image_global_w.rows() != manifest.dims.d_g) {
    throw ShapeError("embed: checkpoint feature dims do not match manifest '" + manifest.name + "'");
  }
  Embeddings e;
  std::vector<MatF> images, texts;
  std::set<std::string> seen_images;
  for (const auto* p : pairs) {
    const auto bundle = io::read_bundle(manifest, p->pair_id);
    if (seen_images.insert(p->image_id).second) {
      e.image_ids.push_back(p->image_id);
      images.push_back(encoder::embed_image<float>(bundle, params.encoder));
    }
    e.caption_ids.push_back(p->caption_id);
    texts.push_back(encoder::embed_text<float>(bundle, params.encoder));
  }
  const Eigen::Index d = images.front().cols();
  e.images.resize(static_cast<Eigen::Index>(images.size()), d);
  e.texts.resize(static_cast<Eigen::Index>(texts.size()), d);
  for (std::size_t i = 0; i < images.size(); ++i) e.images.row(static_cast<Eigen::Index>(i)) = images[i];
  for (std::size_t i = 0; i < texts.size(); ++i) e.texts.row(static_cast<Eigen::Index>(i)) = texts[i];
  return e;
}

void write_embeddings(const Embeddings& e, const fs::path& dir) {
  fs::create_directories(dir);
  io::write_matrix(e.images, dir / "images.aahr");
  io::write_matrix(e.texts, dir / "texts.aahr");
  json j;
  j["image_ids"] = e.image_ids;
  j["caption_ids"] = e.caption_ids;
  std::ofstream out(dir / "ids.json", std::ios::binary | std::ios::trunc);
  if (!out) throw FileError((dir / "ids.json").string(), "cannot open for writing");
  out << j.dump(2) << '\n';
}

Embeddings read_embeddings(const fs::path& dir) {
  Embeddings e;
  for (const char* f : {"images.aahr", "texts.aahr", "ids.json"}) {
    if (!fs::exists(dir / f)) throw FileError((dir / f).string(), "missing embedding file");
  }
  e.images = io::read_matrix(dir / "images.aahr");
  e.texts = io::read_matrix(dir / "texts.aahr");
  std::ifstream in(dir / "ids.json", std::ios::binary);
  try {
    const json j = json::parse(in);
    e.image_ids = j.at("image_ids").get<std::vector<std::string>>();
    e.caption_ids = j.at("caption_ids").get<std::vector<std::string>>();
  } catch (const json::exception& ex) {
    throw FormatError((dir / "ids.json").string() + ": " + ex.what());
  }
  if (e.images.rows() != static_cast<Eigen::Index>(e.image_ids.size()) ||
      e.texts.rows() != static_cast<Eigen::Index>(e.caption_ids.size())) {
    throw FormatError(dir.string() + ": embedding rows do not match ids");
  }
  return e;
}

metrics::GroundTruth ground_truth_for(const Embeddings& e, const io::DatasetManifest& manifest) {
  metrics::GroundTruth gt;
  gt.image_ids = e.image_ids;
  gt.caption_ids = e.caption_ids;
  const std::set<std::string> captions(e.caption_ids.begin(), e.caption_ids.end());
  for (const auto& image : e.image_ids) {
    auto it = manifest.positives.find(image);
    if (it == manifest.positives.end()) continue;
    for (const auto& c : it->second) {
      if (captions.count(c)) gt.positives[image].insert(c);
    }
  }
  return gt;
}

metrics::Evaluation evaluate_embeddings(const Embeddings& e, const io::DatasetManifest& manifest) {
  return metrics::evaluate(e.images, e.texts, ground_truth_for(e, manifest));
}

}  // namespace aahr::trainer
