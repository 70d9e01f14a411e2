#include <aahr/tensorio.hpp>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <random>
#include <sstream>

namespace aahr::io {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

static_assert(std::endian::native == std::endian::little, "tensor files assume a little-endian host");

std::size_t Tensor::numel() const {
  if (dims.empty()) return 0;
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

namespace {

template <typename T>
void put(std::vector<std::uint8_t>& out, T value) {
  std::uint8_t raw[sizeof(T)];
  std::memcpy(raw, &value, sizeof(T));
  out.insert(out.end(), raw, raw + sizeof(T));
}

template <typename T>
T get(std::span<const std::uint8_t> bytes, std::size_t at) {
  T value;
  std::memcpy(&value, bytes.data() + at, sizeof(T));
  return value;
}

void check_tensor(const Tensor& t, const std::string& origin) {
  if (t.dims.empty() || t.dims.size() > 255) throw FormatError(origin + ": ndim must be in [1, 255]");
  for (auto d : t.dims) {
    if (d == 0) throw FormatError(origin + ": zero-sized dimension");
  }
  if (t.data.size() != t.numel()) {
    throw FormatError(origin + ": payload has " + std::to_string(t.data.size()) + " floats, dims need " +
                      std::to_string(t.numel()));
  }
}

std::string dims_str(const std::vector<std::uint32_t>& dims) {
  std::string s = "[";
  for (std::size_t i = 0; i < dims.size(); ++i) s += (i ? "," : "") + std::to_string(dims[i]);
  return s + "]";
}

}  // namespace

std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
  check_tensor(t, "encode_tensor");
  for (float v : t.data) {
    if (!std::isfinite(v)) throw NumericError("encode_tensor: non-finite entry");
  }
  std::vector<std::uint8_t> out;
  out.reserve(7 + 4 * t.dims.size() + 4 * t.data.size());
  out.insert(out.end(), kTensorMagic, kTensorMagic + 4);
  put<std::uint16_t>(out, kTensorVersion);
  put<std::uint8_t>(out, static_cast<std::uint8_t>(t.dims.size()));
  for (auto d : t.dims) put<std::uint32_t>(out, d);
  const auto* raw = reinterpret_cast<const std::uint8_t*>(t.data.data());
  out.insert(out.end(), raw, raw + 4 * t.data.size());
  return out;
}

Tensor decode_tensor(std::span<const std::uint8_t> bytes, const std::string& origin) {
  if (bytes.size() < 7) throw FormatError(origin + ": file shorter than the tensor header");
  if (std::memcmp(bytes.data(), kTensorMagic, 4) != 0) throw FormatError(origin + ": bad magic");
  const auto version = get<std::uint16_t>(bytes, 4);
  if (version != kTensorVersion) throw FormatError(origin + ": unsupported version " + std::to_string(version));
  const auto ndim = get<std::uint8_t>(bytes, 6);
  if (ndim == 0) throw FormatError(origin + ": ndim is zero");
  const std::size_t header = 7 + 4 * static_cast<std::size_t>(ndim);
  if (bytes.size() < header) throw FormatError(origin + ": truncated dims");
  Tensor t;
  t.dims.resize(ndim);
  for (std::size_t i = 0; i < ndim; ++i) t.dims[i] = get<std::uint32_t>(bytes, 7 + 4 * i);
  for (auto d : t.dims) {
    if (d == 0) throw FormatError(origin + ": zero-sized dimension");
  }
  const std::size_t n = t.numel();
  if (bytes.size() - header != 4 * n) {
    throw FormatError(origin + ": payload is " + std::to_string(bytes.size() - header) + " bytes, dims " +
                      dims_str(t.dims) + " need " + std::to_string(4 * n));
  }
  t.data.resize(n);
  std::memcpy(t.data.data(), bytes.data() + header, 4 * n);
  return t;
}

void write_tensor(const Tensor& t, const fs::path& path) {
  const auto bytes = encode_tensor(t);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FileError(path.string(), "cannot open for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FileError(path.string(), "write failed");
}

Tensor read_tensor(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileError(path.string(), "cannot open for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_tensor(bytes, path.string());
}

Tensor tensor_from_matrix(const MatF& m) {
  if (m.rows() == 0 || m.cols() == 0) throw ShapeError("tensor_from_matrix: empty matrix");
  Tensor t;
  t.dims = {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())};
  t.data.resize(static_cast<std::size_t>(m.size()));
  Eigen::Map<Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(t.data.data(), m.rows(),
                                                                                     m.cols()) = m;
  return t;
}

Tensor tensor_from_vector(const MatF& row) {
  if (row.size() == 0) throw ShapeError("tensor_from_vector: empty");
  Tensor t;
  t.dims = {static_cast<std::uint32_t>(row.size())};
  t.data.assign(row.data(), row.data() + row.size());
  return t;
}

MatF matrix_from_tensor(const Tensor& t) {
  check_tensor(t, "matrix_from_tensor");
  if (t.dims.size() == 1) {
    return Eigen::Map<const MatF>(t.data.data(), 1, t.dims[0]);
  }
  if (t.dims.size() == 2) {
    return Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        t.data.data(), t.dims[0], t.dims[1]);
  }
  throw ShapeError("matrix_from_tensor: tensor has " + std::to_string(t.dims.size()) + " dims");
}

// ---------------------------------------------------------------------------
// Manifest

const PairEntry& DatasetManifest::pair(const std::string& pair_id) const {
  for (const auto& p : pairs) {
    if (p.pair_id == pair_id) return p;
  }
  throw DatasetError("pair '" + pair_id + "' not in manifest '" + name + "'");
}

std::vector<const PairEntry*> DatasetManifest::split(const std::string& split_name) const {
  std::vector<const PairEntry*> out;
  for (const auto& p : pairs) {
    if (split_name.empty() || split_name == "all" || p.split == split_name) out.push_back(&p);
  }
  return out;
}

namespace {

json manifest_json(const DatasetManifest& m) {
  json j;
  j["name"] = m.name;
  j["dims"] = {{"d_v", m.dims.d_v}, {"d_w", m.dims.d_w}, {"d_g", m.dims.d_g}};
  json pairs = json::array();
  for (const auto& p : m.pairs) {
    pairs.push_back({{"pair_id", p.pair_id},
                     {"image_id", p.image_id},
                     {"caption_id", p.caption_id},
                     {"split", p.split},
                     {"n_r", p.n_r},
                     {"n_t", p.n_t},
                     {"regions", p.regions},
                     {"words", p.words},
                     {"global_image", p.global_image},
                     {"global_text", p.global_text}});
  }
  j["pairs"] = std::move(pairs);
  json pos = json::object();
  for (const auto& [image, caps] : m.positives) pos[image] = std::vector<std::string>(caps.begin(), caps.end());
  j["positives"] = std::move(pos);
  return j;
}

template <typename T>
T field(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw FormatError(where + ": missing field '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw FormatError(where + ": field '" + key + "': " + e.what());
  }
}

}  // namespace

std::string manifest_to_json(const DatasetManifest& m) { return manifest_json(m).dump(2) + "\n"; }

void save_manifest(const DatasetManifest& m, const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FileError(path.string(), "cannot open for writing");
  out << manifest_to_json(m);
  if (!out) throw FileError(path.string(), "write failed");
}

DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileError(path.string(), "cannot open manifest");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  const std::string where = path.string();
  DatasetManifest m;
  m.root = path.parent_path();
  m.name = field<std::string>(j, "name", where);
  const json& dims = j.contains("dims") ? j.at("dims") : throw FormatError(where + ": missing field 'dims'");
  m.dims.d_v = field<std::uint32_t>(dims, "d_v", where);
  m.dims.d_w = field<std::uint32_t>(dims, "d_w", where);
  m.dims.d_g = field<std::uint32_t>(dims, "d_g", where);
  if (!j.contains("pairs") || !j.at("pairs").is_array()) throw FormatError(where + ": 'pairs' must be an array");
  std::set<std::string> seen;
  for (const auto& pj : j.at("pairs")) {
    PairEntry p;
    p.pair_id = field<std::string>(pj, "pair_id", where);
    p.image_id = field<std::string>(pj, "image_id", where);
    p.caption_id = field<std::string>(pj, "caption_id", where);
    p.split = pj.value("split", std::string("train"));
    p.n_r = field<std::uint32_t>(pj, "n_r", where);
    p.n_t = field<std::uint32_t>(pj, "n_t", where);
    p.regions = field<std::string>(pj, "regions", where);
    p.words = field<std::string>(pj, "words", where);
    p.global_image = field<std::string>(pj, "global_image", where);
    p.global_text = field<std::string>(pj, "global_text", where);
    if (p.n_r == 0 || p.n_t == 0) throw FormatError(where + ": pair '" + p.pair_id + "' has n_r or n_t = 0");
    if (!seen.insert(p.pair_id).second) throw FormatError(where + ": duplicate pair_id '" + p.pair_id + "'");
    m.pairs.push_back(std::move(p));
  }
  if (j.contains("positives")) {
    try {
      for (const auto& [image, caps] : j.at("positives").items()) {
        for (const auto& c : caps) m.positives[image].insert(c.get<std::string>());
      }
    } catch (const json::exception& e) {
      throw FormatError(where + ": positives: " + e.what());
    }
  }
  for (const auto& p : m.pairs) {
    auto it = m.positives.find(p.image_id);
    if (it == m.positives.end() || !it->second.count(p.caption_id)) {
      throw DatasetError(where + ": pair '" + p.pair_id + "' is not listed in positives for image '" + p.image_id +
                         "'");
    }
  }
  return m;
}

namespace {

MatF load_checked(const DatasetManifest& m, const std::string& rel, std::uint32_t rows, std::uint32_t cols,
                  bool vector) {
  const fs::path path = m.root / rel;
  if (!fs::exists(path)) throw DatasetError("missing tensor file " + path.string());
  const Tensor t = read_tensor(path);
  const std::vector<std::uint32_t> want = vector ? std::vector<std::uint32_t>{cols}
                                                 : std::vector<std::uint32_t>{rows, cols};
  if (t.dims != want) {
    throw FormatError(path.string() + ": expected dims " + dims_str(want) + ", got " + dims_str(t.dims));
  }
  MatF mat = matrix_from_tensor(t);
  if (!mat.allFinite()) throw FormatError(path.string() + ": non-finite entries");
  return mat;
}

}  // namespace

FeatureBundle read_bundle(const DatasetManifest& m, const std::string& pair_id) {
  const PairEntry& p = m.pair(pair_id);
  FeatureBundle b;
  b.pair_id = p.pair_id;
  b.regions = load_checked(m, p.regions, p.n_r, m.dims.d_v, false);
  b.words = load_checked(m, p.words, p.n_t, m.dims.d_w, false);
  b.global_image = load_checked(m, p.global_image, 1, m.dims.d_g, true);
  b.global_text = load_checked(m, p.global_text, 1, m.dims.d_g, true);
  return b;
}

std::vector<FeatureBundle> read_bundles(const DatasetManifest& m, const std::vector<const PairEntry*>& pairs) {
  std::vector<FeatureBundle> out;
  out.reserve(pairs.size());
  for (const auto* p : pairs) out.push_back(read_bundle(m, p->pair_id));
  return out;
}

void validate_manifest(const DatasetManifest& m) {
  for (const auto& p : m.pairs) (void)read_bundle(m, p.pair_id);
}

// ---------------------------------------------------------------------------
// Synthetic data

void SynthSpec::validate() const {
  if (num_concepts < 2) throw ConfigError("synth: num_concepts must be >= 2");
  if (pairs_per_concept < 1) throw ConfigError("synth: pairs_per_concept must be >= 1");
  if (holdout_per_concept >= pairs_per_concept && holdout_per_concept != 0) {
    throw ConfigError("synth: holdout_per_concept must be < pairs_per_concept");
  }
  if (captions_per_image < 1) throw ConfigError("synth: captions_per_image must be >= 1");
  if (d_v == 0 || d_w == 0 || d_g == 0 || n_r == 0 || n_t == 0) throw ConfigError("synth: dims must be >= 1");
  if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) throw ConfigError("synth: noise_sigma must be >= 0");
}

SynthSpec synth_spec_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("synth spec: ") + e.what());
  }
  static const std::set<std::string> known = {"name", "num_concepts", "pairs_per_concept", "holdout_per_concept",
                                              "captions_per_image", "d_v", "d_w", "d_g", "n_r", "n_t",
                                              "noise_sigma", "seed"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ConfigError("synth spec: unknown key '" + key + "'");
  }
  SynthSpec s;
  try {
    s.name = j.value("name", s.name);
    s.num_concepts = j.value("num_concepts", s.num_concepts);
    s.pairs_per_concept = j.value("pairs_per_concept", s.pairs_per_concept);
    s.holdout_per_concept = j.value("holdout_per_concept", s.holdout_per_concept);
    s.captions_per_image = j.value("captions_per_image", s.captions_per_image);
    s.d_v = j.value("d_v", s.d_v);
    s.d_w = j.value("d_w", s.d_w);
    s.d_g = j.value("d_g", s.d_g);
    s.n_r = j.value("n_r", s.n_r);
    s.n_t = j.value("n_t", s.n_t);
    s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
    s.seed = j.value("seed", s.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("synth spec: ") + e.what());
  }
  s.validate();
  return s;
}

std::string synth_spec_to_json(const SynthSpec& s) {
  json j = {{"name", s.name},
            {"num_concepts", s.num_concepts},
            {"pairs_per_concept", s.pairs_per_concept},
            {"holdout_per_concept", s.holdout_per_concept},
            {"captions_per_image", s.captions_per_image},
            {"d_v", s.d_v},
            {"d_w", s.d_w},
            {"d_g", s.d_g},
            {"n_r", s.n_r},
            {"n_t", s.n_t},
            {"noise_sigma", s.noise_sigma},
            {"seed", s.seed}};
  return j.dump(2) + "\n";
}

namespace {

using Engine = std::mt19937_64;

MatD gaussian(Engine& rng, Eigen::Index rows, Eigen::Index cols, double stddev) {
  std::normal_distribution<double> dist(0.0, 1.0);
  MatD m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = stddev * dist(rng);
  }
  return m;
}

// dim x latent with orthonormal columns.
MatD orthonormal_map(Engine& rng, std::uint32_t dim, std::uint32_t latent) {
  const MatD a = gaussian(rng, dim, latent, 1.0);
  Eigen::HouseholderQR<MatD> qr(a);
  return qr.householderQ() * MatD::Identity(dim, latent);
}

std::string padded(std::size_t i, int width) {
  std::string s = std::to_string(i);
  return std::string(static_cast<std::size_t>(std::max(0, width - static_cast<int>(s.size()))), '0') + s;
}

}  // namespace

DatasetManifest generate_synthetic(const SynthSpec& spec, const fs::path& out_dir) {
  spec.validate();
  const std::uint32_t latent = std::min({spec.d_v, spec.d_w, spec.d_g});
  Engine rng(spec.seed);

  const MatD region_map = orthonormal_map(rng, spec.d_v, latent);
  const MatD word_map = orthonormal_map(rng, spec.d_w, latent);
  const MatD image_global_map = orthonormal_map(rng, spec.d_g, latent);
  const MatD text_global_map = orthonormal_map(rng, spec.d_g, latent);

  MatD concepts = gaussian(rng, spec.num_concepts, latent, 1.0);
  concepts.rowwise().normalize();

  const double sigma = spec.noise_sigma;

  fs::create_directories(out_dir / "features");
  DatasetManifest m;
  m.name = spec.name;
  m.dims = {spec.d_v, spec.d_w, spec.d_g};
  m.root = out_dir;

  std::size_t image_index = 0;
  for (std::uint32_t c = 0; c < spec.num_concepts; ++c) {
    for (std::uint32_t k = 0; k < spec.pairs_per_concept; ++k, ++image_index) {
      const std::string split = k + spec.holdout_per_concept >= spec.pairs_per_concept ? "test" : "train";
      const std::string image_id = "img" + padded(image_index, 5);
      const RowVec<double> instance = concepts.row(c) + gaussian(rng, 1, latent, sigma);

      MatD regions = (region_map * instance.transpose()).transpose().replicate(spec.n_r, 1);
      regions += gaussian(rng, spec.n_r, spec.d_v, sigma);
      MatD global_image = (image_global_map * instance.transpose()).transpose();
      global_image += gaussian(rng, 1, spec.d_g, sigma);

      const std::string regions_rel = "features/" + image_id + ".regions.aahr";
      const std::string gimg_rel = "features/" + image_id + ".global.aahr";
      write_tensor(tensor_from_matrix(regions.cast<float>()), out_dir / regions_rel);
      write_tensor(tensor_from_vector(global_image.cast<float>()), out_dir / gimg_rel);

      for (std::uint32_t cap = 0; cap < spec.captions_per_image; ++cap) {
        const std::string caption_id = image_id + "_c" + std::to_string(cap);
        MatD words = (word_map * instance.transpose()).transpose().replicate(spec.n_t, 1);
        words += gaussian(rng, spec.n_t, spec.d_w, sigma);
        MatD global_text = (text_global_map * instance.transpose()).transpose();
        global_text += gaussian(rng, 1, spec.d_g, sigma);

        const std::string words_rel = "features/" + caption_id + ".words.aahr";
        const std::string gtxt_rel = "features/" + caption_id + ".global.aahr";
        write_tensor(tensor_from_matrix(words.cast<float>()), out_dir / words_rel);
        write_tensor(tensor_from_vector(global_text.cast<float>()), out_dir / gtxt_rel);

        PairEntry p;
        p.pair_id = caption_id;
        p.image_id = image_id;
        p.caption_id = caption_id;
        p.split = split;
        p.n_r = spec.n_r;
        p.n_t = spec.n_t;
        p.regions = regions_rel;
        p.words = words_rel;
        p.global_image = gimg_rel;
        p.global_text = gtxt_rel;
        m.pairs.push_back(std::move(p));
        m.positives[image_id].insert(caption_id);
      }
    }
  }
  save_manifest(m, out_dir / "manifest.json");
  return m;
}

}  // namespace aahr::io
