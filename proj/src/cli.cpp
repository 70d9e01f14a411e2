#include <aahr/cli.hpp>
#include <aahr/trainer.hpp>

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>

namespace aahr::cli {

namespace fs = std::filesystem;

namespace {

constexpr const char* kExitCodes =
    "Exit codes:\n"
    "  0   success\n"
    "  1   internal error\n"
    "  2   invalid configuration\n"
    "  3   missing or unreadable file\n"
    "  4   non-finite numbers or diverged training\n"
    "  5   malformed file contents\n"
    "  6   inconsistent dataset manifest\n"
    "  7   shape mismatch (e.g. checkpoint vs manifest dims)\n"
    "  8   evaluation protocol violation (e.g. empty ground truth)\n"
    "  9   memory bank capacity exceeded\n"
    "  10  parameter structure mismatch\n"
    "  64  usage error (unknown flag, missing argument)\n";

constexpr const char* kDefaultData = "data/synthetic";

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileError(path, "cannot open");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FileError(path.string(), "cannot open for writing");
  out << text;
}

int code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return kConfig;
  if (dynamic_cast<const FileError*>(&e)) return kFile;
  if (dynamic_cast<const FormatError*>(&e)) return kFormat;
  if (dynamic_cast<const DatasetError*>(&e)) return kDataset;
  if (dynamic_cast<const ShapeError*>(&e)) return kShape;
  if (dynamic_cast<const NumericError*>(&e)) return kNumeric;
  if (dynamic_cast<const TrainingError*>(&e)) return kNumeric;
  if (dynamic_cast<const ProtocolError*>(&e)) return kProtocol;
  if (dynamic_cast<const CapacityError*>(&e)) return kCapacity;
  if (dynamic_cast<const CongruenceError*>(&e)) return kCongruence;
  return kInternal;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Image-text matching over precomputed features", "aahr"};
  app.footer(kExitCodes);
  app.require_subcommand(1);

  std::string synth_spec = "default";
  std::string synth_out = kDefaultData;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic feature dataset");
  synth->add_option("--spec", synth_spec, "Generator spec JSON, or 'default'")->capture_default_str();
  synth->add_option("--out", synth_out, "Output directory")->capture_default_str();

  std::string config_arg;
  std::string train_manifest;
  std::string train_out;
  int num_prototypes = 0;
  auto* train = app.add_subcommand("train", "Train a model");
  train->add_option("--config", config_arg, "Config JSON, or a profile: synthetic, flickr30k, mscoco")->required();
  train->add_option("--manifest", train_manifest, "Dataset manifest (default: config value, else " +
                                                      std::string(kDefaultData) + "/manifest.json)");
  train->add_option("--out", train_out, "Output directory (default: config output_dir)");
  train->add_option("--num-prototypes", num_prototypes, "Override the number of prototypes")
      ->check(CLI::PositiveNumber);

  std::string checkpoint;
  std::string embed_manifest;
  std::string embed_out;
  std::string split = "test";
  auto* embed = app.add_subcommand("embed", "Compute embeddings for a split");
  embed->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();
  embed->add_option("--manifest", embed_manifest, "Dataset manifest")->required();
  embed->add_option("--out", embed_out, "Output directory")->required();
  embed->add_option("--split", split, "Split to embed ('all' for every pair)")->capture_default_str();

  std::string embeddings_dir;
  std::string eval_manifest;
  std::string report_path;
  auto* evaluate = app.add_subcommand("evaluate", "Score embeddings against a manifest's ground truth");
  evaluate->add_option("--embeddings", embeddings_dir, "Embedding directory from 'embed'")->required();
  evaluate->add_option("--manifest", eval_manifest, "Dataset manifest")->required();
  evaluate->add_option("--report", report_path, "Report JSON path (default: <embeddings>/report.json)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "aahr: " << e.what() << "\n";
    return kUsage;
  }

  try {
    if (*synth) {
      io::SynthSpec spec;
      if (synth_spec != "default") spec = io::synth_spec_from_json(read_text(synth_spec));
      const auto manifest = io::generate_synthetic(spec, synth_out);
      out << "wrote " << manifest.pairs.size() << " pairs to " << (fs::path(synth_out) / "manifest.json").string()
          << "\n";
    } else if (*train) {
      auto config = trainer::load_config(config_arg);
      if (!train_manifest.empty()) config.manifest = train_manifest;
      if (config.manifest.empty()) config.manifest = (fs::path(kDefaultData) / "manifest.json").string();
      if (!train_out.empty()) config.output_dir = train_out;
      if (num_prototypes > 0) config.num_prototypes = num_prototypes;
      config.validate();
      const auto manifest = io::load_manifest(config.manifest);
      const auto state = trainer::train(config, manifest);
      out << "trained " << state.step << " steps; checkpoint at "
          << (fs::path(config.output_dir) / "checkpoint").string() << "\n";
    } else if (*embed) {
      const auto state = trainer::load_checkpoint(checkpoint);
      const auto manifest = io::load_manifest(embed_manifest);
      const auto e = trainer::embed(state.params, manifest, split);
      trainer::write_embeddings(e, embed_out);
      out << "wrote " << e.image_ids.size() << " image and " << e.caption_ids.size() << " caption embeddings to "
          << embed_out << "\n";
    } else if (*evaluate) {
      const auto e = trainer::read_embeddings(embeddings_dir);
      const auto manifest = io::load_manifest(eval_manifest);
      const auto result = trainer::evaluate_embeddings(e, manifest);
      const fs::path report = report_path.empty() ? fs::path(embeddings_dir) / "report.json" : fs::path(report_path);
      write_text(report, metrics::evaluation_to_json(result));
      out << metrics::format_table(result);
    }
    return kOk;
  } catch (const std::exception& e) {
    err << "aahr: " << e.what() << "\n";
    return code_for(e);
  }
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv{"aahr"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace aahr::cli
