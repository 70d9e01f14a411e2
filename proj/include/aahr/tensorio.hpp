#pragma once

// Portable tensor files, dataset manifests and the synthetic concept
// generator.
//
// Tensor file layout (all integers little-endian):
//
//   offset 0   magic    "AAHR" (4 bytes)
//   offset 4   version  u16 (currently 1)
//   offset 6   ndim     u8
//   offset 7   dims     u32 x ndim
//   then       payload  f32 x prod(dims), row-major
//
// The header is therefore 7 + 4 * ndim bytes long.

#include <aahr/types.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace aahr::io {

inline constexpr char kTensorMagic[4] = {'A', 'A', 'H', 'R'};
inline constexpr std::uint16_t kTensorVersion = 1;

struct Tensor {
  std::vector<std::uint32_t> dims;
  std::vector<float> data;

  std::size_t numel() const;
  bool operator==(const Tensor&) const = default;
};

std::vector<std::uint8_t> encode_tensor(const Tensor& t);
Tensor decode_tensor(std::span<const std::uint8_t> bytes, const std::string& origin = "<memory>");

void write_tensor(const Tensor& t, const std::filesystem::path& path);
Tensor read_tensor(const std::filesystem::path& path);

/// 2-D tensor with dims [rows, cols].
Tensor tensor_from_matrix(const MatF& m);
/// Vector tensor with dims [n].
Tensor tensor_from_vector(const MatF& row);
/// 1-D tensors become a 1 x n row; 2-D tensors keep their shape.
MatF matrix_from_tensor(const Tensor& t);

template <typename Scalar>
void write_matrix(const Mat<Scalar>& m, const std::filesystem::path& path) {
  write_tensor(tensor_from_matrix(m.template cast<float>()), path);
}

inline MatF read_matrix(const std::filesystem::path& path) { return matrix_from_tensor(read_tensor(path)); }

/// Precomputed inputs for one image-caption pair.
struct FeatureBundle {
  std::string pair_id;
  MatF regions;       // n_r x d_v
  MatF words;         // n_t x d_w
  MatF global_image;  // 1 x d_g
  MatF global_text;   // 1 x d_g
};

struct FeatureDims {
  std::uint32_t d_v = 0;
  std::uint32_t d_w = 0;
  std::uint32_t d_g = 0;
  bool operator==(const FeatureDims&) const = default;
};

struct PairEntry {
  std::string pair_id;
  std::string image_id;
  std::string caption_id;
  std::string split = "train";
  std::uint32_t n_r = 0;
  std::uint32_t n_t = 0;
  std::string regions;       // paths relative to the manifest directory
  std::string words;
  std::string global_image;
  std::string global_text;
};

struct DatasetManifest {
  std::string name;
  FeatureDims dims;
  std::vector<PairEntry> pairs;
  /// image_id -> caption ids that correctly describe it.
  std::map<std::string, std::set<std::string>> positives;
  /// Directory that relative tensor paths resolve against.
  std::filesystem::path root;

  const PairEntry& pair(const std::string& pair_id) const;
  std::vector<const PairEntry*> split(const std::string& name) const;
};

/// Parses and structurally validates a manifest. Paths are not opened here.
DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const DatasetManifest& m, const std::filesystem::path& path);
std::string manifest_to_json(const DatasetManifest& m);

/// Opens every referenced tensor file and checks positives closure.
void validate_manifest(const DatasetManifest& m);

FeatureBundle read_bundle(const DatasetManifest& m, const std::string& pair_id);
std::vector<FeatureBundle> read_bundles(const DatasetManifest& m, const std::vector<const PairEntry*>& pairs);

struct SynthSpec {
  std::string name = "synthetic";
  std::uint32_t num_concepts = 8;
  std::uint32_t pairs_per_concept = 30;
  /// The last `holdout_per_concept` images of each concept get split "test".
  std::uint32_t holdout_per_concept = 5;
  std::uint32_t captions_per_image = 1;
  std::uint32_t d_v = 64;
  std::uint32_t d_w = 64;
  std::uint32_t d_g = 32;
  std::uint32_t n_r = 8;
  std::uint32_t n_t = 6;
  double noise_sigma = 0.1;
  std::uint64_t seed = 42;

  void validate() const;
};

SynthSpec synth_spec_from_json(const std::string& text);
std::string synth_spec_to_json(const SynthSpec& s);

/// Writes tensor files under `out_dir/features/` plus `out_dir/manifest.json`
/// and returns the manifest.
///
/// Every concept owns a unit latent; every image draws an instance latent
/// around it (per-coordinate std noise_sigma), shared with its captions.
/// Regions, words and the two global vectors are the instance latent pushed
/// through fixed orthonormal per-modality maps, plus independent Gaussian
/// noise with per-entry std noise_sigma. With noise_sigma = 0 all pairs of a
/// concept coincide.
DatasetManifest generate_synthetic(const SynthSpec& spec, const std::filesystem::path& out_dir);

}  // namespace aahr::io
