#include "mmfusion/cohort.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <unordered_map>

#include <json.hpp>

#include "mmfusion/errors.hpp"

namespace mmfusion::cohort {
namespace {

constexpr double kVoxelNoise = 0.25;
constexpr const char* kCohortFormat = "mmfusion-cohort-v1";

struct Planting {
  bool xnor = false;       // label = NOT(a XOR b)
  double bit_prob = 0.5;   // P(a) = P(b)
  double flip_prob = 0.0;  // label corruption
};

// Chooses P(a) = P(b) = q so that the corrupted label hits the prevalence.
Planting planting_for(const SyntheticConfig& c) {
  Planting p;
  p.flip_prob = std::clamp(c.noise_level, 0.0, 1.0) / 2.0;
  double clean = p.flip_prob < 0.5 ? (c.prevalence - p.flip_prob) / (1.0 - 2.0 * p.flip_prob) : 0.5;
  clean = std::clamp(clean, 0.01, 0.99);
  if (clean > 0.5) {
    p.xnor = true;
    clean = 1.0 - clean;
  }
  // 2q(1-q) = clean
  p.bit_prob = (1.0 - std::sqrt(1.0 - 2.0 * clean)) / 2.0;
  return p;
}

void add_blob(Volume& v, double cz, double cy, double cx, double amplitude, double sigma) {
  const double inv = 1.0 / (2.0 * sigma * sigma);
  for (std::size_t z = 0; z < v.shape.depth; ++z)
    for (std::size_t y = 0; y < v.shape.height; ++y)
      for (std::size_t x = 0; x < v.shape.width; ++x) {
        const double dz = static_cast<double>(z) - cz, dy = static_cast<double>(y) - cy,
                     dx = static_cast<double>(x) - cx;
        v.at(z, y, x) += static_cast<float>(amplitude * std::exp(-(dz * dz + dy * dy + dx * dx) * inv));
      }
}

Volume noise_volume(const GridShape& shape, Rng& rng) {
  Volume v{shape, std::vector<float>(shape.voxels())};
  for (float& x : v.voxels) x = static_cast<float>(kVoxelNoise * standard_normal(rng));
  return v;
}

double blob_sigma(const GridShape& s) {
  return std::max(1.0, static_cast<double>(std::min({s.depth, s.height, s.width})) / 4.0);
}

double centre(std::size_t n) { return (static_cast<double>(n) - 1.0) / 2.0; }

PatientRecord generate_record(const SyntheticConfig& c, const Planting& plant, std::size_t index) {
  Rng rng(mix_seed(c.seed, index));
  PatientRecord r;
  char buf[32];
  std::snprintf(buf, sizeof buf, "P%05zu", index);
  r.id = buf;

  const bool a = uniform01(rng) < plant.bit_prob;
  const bool b = uniform01(rng) < plant.bit_prob;
  const bool flip = uniform01(rng) < plant.flip_prob;
  const bool clean = (a != b) != plant.xnor;
  r.label = (clean != flip) ? 1 : 0;

  const GridShape& g = c.grid_shape;
  const double sigma = blob_sigma(g);
  const auto jitter = [&](std::size_t n) {
    return n >= 8 ? static_cast<double>(std::uniform_int_distribution<int>(-1, 1)(rng)) : 0.0;
  };

  r.tumor = noise_volume(g, rng);
  const double amp = (a ? 1.0 : -1.0) * c.signal_strength * (0.5 + 0.5 * uniform01(rng));
  const double jz = jitter(g.depth), jy = jitter(g.height), jx = jitter(g.width);
  add_blob(r.tumor, centre(g.depth) + jz, centre(g.height) + jy, centre(g.width) + jx, amp, sigma);

  for (auto& node : r.nodes) {
    node = noise_volume(g, rng);
    const double nz = uniform01(rng) * static_cast<double>(g.depth - 1);
    const double ny = uniform01(rng) * static_cast<double>(g.height - 1);
    const double nx = uniform01(rng) * static_cast<double>(g.width - 1);
    add_blob(node, nz, ny, nx, c.signal_strength * (2.0 * uniform01(rng) - 1.0), sigma);
  }

  // Clinical covariates follow the baseline proportions of the source cohort.
  r.clinical.resize(c.vector_dims.clinical);
  const double age = uniform01(rng) < 0.59 ? 70.0 + 15.0 * uniform01(rng) : 45.0 + 25.0 * uniform01(rng);
  r.clinical[0] = (age - 65.0) / 10.0;
  r.clinical[1] = uniform01(rng) < 0.835 ? 1.0 : -1.0;
  const double u = uniform01(rng);
  const int kps = u < 0.001 ? 1 : u < 0.558 ? 2 : u < 0.995 ? 3 : 4;
  r.clinical[2] = static_cast<double>(kps) - 2.5;
  const double os = uniform01(rng) < 0.47 ? 35.0 + std::exponential_distribution<double>(1.0 / 20.0)(rng)
                                          : 35.0 * uniform01(rng);
  r.clinical[3] = (os - 35.0) / 20.0;
  for (std::size_t i = 4; i < r.clinical.size(); ++i) r.clinical[i] = standard_normal(rng);

  r.hematology.resize(c.vector_dims.hematology);
  for (double& v : r.hematology) v = standard_normal(rng);

  r.radiomics.resize(c.vector_dims.radiomics);
  r.radiomics[0] = (b ? 1.0 : -1.0) * c.signal_strength * (0.5 + 0.5 * uniform01(rng));
  for (std::size_t i = 1; i < r.radiomics.size(); ++i) r.radiomics[i] = standard_normal(rng);
  return r;
}

void write_f32_le(std::ofstream& out, const std::vector<float>& values) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size() * sizeof(float)));
  } else {
    for (float f : values) {
      auto bits = __builtin_bswap32(std::bit_cast<std::uint32_t>(f));
      out.write(reinterpret_cast<const char*>(&bits), sizeof bits);
    }
  }
}

std::vector<float> read_f32_le(const std::vector<char>& bytes, std::size_t offset, std::size_t count) {
  std::vector<float> out(count);
  std::memcpy(out.data(), bytes.data() + offset, count * sizeof(float));
  if constexpr (std::endian::native != std::endian::little) {
    for (float& f : out) f = std::bit_cast<float>(__builtin_bswap32(std::bit_cast<std::uint32_t>(f)));
  }
  return out;
}

std::vector<double> finite_vector(const nlohmann::json& j, const char* field, const std::string& id) {
  auto v = j.at(field).get<std::vector<double>>();
  for (double x : v)
    if (!std::isfinite(x)) throw ParseError("record " + id + ": non-finite value in " + field);
  return v;
}

}  // namespace

void validate(const SyntheticConfig& c) {
  if (c.n_patients < 10) throw ConfigError("n_patients must be at least 10");
  const auto& g = c.grid_shape;
  if (g.depth == 0 || g.height == 0 || g.width == 0) throw ConfigError("grid_shape entries must be positive");
  if (c.vector_dims.clinical < 4) throw ConfigError("clinical vector needs at least 4 entries");
  if (c.vector_dims.hematology == 0 || c.vector_dims.radiomics == 0)
    throw ConfigError("hematology and radiomics vectors must be nonempty");
  if (!(c.prevalence > 0.0 && c.prevalence < 1.0)) throw ConfigError("prevalence must lie in (0,1)");
  if (!std::isfinite(c.signal_strength) || c.signal_strength < 0.0)
    throw ConfigError("signal_strength must be finite and nonnegative");
  if (!std::isfinite(c.noise_level) || c.noise_level < 0.0)
    throw ConfigError("noise_level must be finite and nonnegative");
}

SyntheticConfig synthetic_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("generator config must be a JSON object");
  SyntheticConfig c;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "n_patients") c.n_patients = v.get<std::size_t>();
      else if (key == "signal_strength") c.signal_strength = v.get<double>();
      else if (key == "noise_level") c.noise_level = v.get<double>();
      else if (key == "prevalence") c.prevalence = v.get<double>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "grid_shape" || key == "vector_dims") {
        const auto a = v.get<std::vector<std::size_t>>();
        if (a.size() != 3) throw ConfigError(key + " needs 3 entries");
        if (key == "grid_shape") c.grid_shape = {a[0], a[1], a[2]};
        else c.vector_dims = {a[0], a[1], a[2]};
      } else {
        throw ConfigError("unknown generator key '" + key + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("generator config: ") + e.what());
  }
  validate(c);
  return c;
}

nlohmann::json to_json(const SyntheticConfig& c) {
  return {{"n_patients", c.n_patients},
          {"grid_shape", {c.grid_shape.depth, c.grid_shape.height, c.grid_shape.width}},
          {"vector_dims", {c.vector_dims.clinical, c.vector_dims.hematology, c.vector_dims.radiomics}},
          {"signal_strength", c.signal_strength},
          {"noise_level", c.noise_level},
          {"prevalence", c.prevalence},
          {"seed", c.seed}};
}

Cohort generate_cohort(const SyntheticConfig& config) {
  validate(config);
  const Planting plant = planting_for(config);
  Cohort out(config.n_patients);
  const auto n = static_cast<std::int64_t>(config.n_patients);
#pragma omp parallel for schedule(dynamic, 16)
  for (std::int64_t i = 0; i < n; ++i)
    out[static_cast<std::size_t>(i)] = generate_record(config, plant, static_cast<std::size_t>(i));
  return out;
}

double tumor_blob_statistic(const Volume& tumor) {
  const auto& s = tumor.shape;
  const auto lo = [](std::size_t n) { return n / 4; };
  const auto hi = [](std::size_t n) { return std::max(n - n / 4, n / 4 + 1); };
  double acc = 0.0;
  std::size_t count = 0;
  for (std::size_t z = lo(s.depth); z < hi(s.depth); ++z)
    for (std::size_t y = lo(s.height); y < hi(s.height); ++y)
      for (std::size_t x = lo(s.width); x < hi(s.width); ++x) {
        acc += tumor.at(z, y, x);
        ++count;
      }
  return acc / static_cast<double>(count);
}

int planted_label(const PatientRecord& record, const SyntheticConfig& config) {
  const Planting plant = planting_for(config);
  const bool a = tumor_blob_statistic(record.tumor) > 0.0;
  const bool b = record.radiomics.at(0) > 0.0;
  return ((a != b) != plant.xnor) ? 1 : 0;
}

std::vector<FoldSplit> split_folds(const Cohort& cohort, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("fold count must be at least 2");
  if (cohort.size() < k * 10)
    throw ConfigError("cohort of " + std::to_string(cohort.size()) + " records is too small for " +
                      std::to_string(k) + " folds (need at least " + std::to_string(k * 10) + ")");

  Rng rng(seed);
  std::array<std::vector<std::size_t>, 2> by_class;
  for (std::size_t i = 0; i < cohort.size(); ++i) by_class[cohort[i].label ? 1 : 0].push_back(i);
  for (auto& c : by_class) std::shuffle(c.begin(), c.end(), rng);

  // Round-robin over the class-ordered list keeps every fold stratified.
  std::vector<std::size_t> fold_of(cohort.size());
  std::size_t pos = 0;
  for (const auto& c : by_class)
    for (std::size_t idx : c) fold_of[idx] = pos++ % k;

  std::vector<FoldSplit> splits(k);
  for (std::size_t f = 0; f < k; ++f) {
    std::array<std::vector<std::size_t>, 2> rest;
    std::vector<std::size_t> test;
    for (const auto& c : by_class)
      for (std::size_t idx : c) {
        if (fold_of[idx] == f)
          test.push_back(idx);
        else
          rest[cohort[idx].label ? 1 : 0].push_back(idx);
      }
    const std::size_t n_rest = rest[0].size() + rest[1].size();
    const auto n_val = static_cast<std::size_t>(std::llround(static_cast<double>(n_rest) / 8.0));
    const auto val0 = std::min(rest[0].size(), static_cast<std::size_t>(std::llround(
                                                   static_cast<double>(n_val * rest[0].size()) /
                                                   static_cast<double>(n_rest))));
    const std::size_t val1 = std::min(rest[1].size(), n_val - val0);

    std::vector<std::size_t> train, val;
    for (std::size_t c = 0; c < 2; ++c) {
      const std::size_t take = c == 0 ? val0 : val1;
      val.insert(val.end(), rest[c].begin(), rest[c].begin() + static_cast<std::ptrdiff_t>(take));
      train.insert(train.end(), rest[c].begin() + static_cast<std::ptrdiff_t>(take), rest[c].end());
    }
    for (auto* list : {&train, &val, &test}) std::sort(list->begin(), list->end());
    const auto ids = [&](const std::vector<std::size_t>& idx) {
      std::vector<std::string> out;
      out.reserve(idx.size());
      for (std::size_t i : idx) out.push_back(cohort[i].id);
      return out;
    };
    splits[f] = {ids(train), ids(val), ids(test)};
  }
  return splits;
}

std::vector<const PatientRecord*> select(const Cohort& cohort, const std::vector<std::string>& ids) {
  std::unordered_map<std::string, const PatientRecord*> index;
  for (const auto& r : cohort) index.emplace(r.id, &r);
  std::vector<const PatientRecord*> out;
  out.reserve(ids.size());
  for (const auto& id : ids) {
    auto it = index.find(id);
    if (it == index.end()) throw ConfigError("unknown record id " + id);
    out.push_back(it->second);
  }
  return out;
}

Volume augment_volume(const Volume& volume, double flip_prob, double noise_prob, double noise_sigma,
                      Rng& rng) {
  if (flip_prob < 0.0 || flip_prob > 1.0 || noise_prob < 0.0 || noise_prob > 1.0)
    throw ConfigError("augmentation probabilities must lie in [0,1]");
  // Fixed draw order so equal seeds pick equal axes.
  const double u_flip = uniform01(rng);
  const int axis = std::uniform_int_distribution<int>(0, 2)(rng);
  const double u_noise = uniform01(rng);

  Volume out = volume;
  const auto& s = volume.shape;
  if (u_flip < flip_prob) {
    for (std::size_t z = 0; z < s.depth; ++z)
      for (std::size_t y = 0; y < s.height; ++y)
        for (std::size_t x = 0; x < s.width; ++x) {
          const std::size_t sz = axis == 0 ? s.depth - 1 - z : z;
          const std::size_t sy = axis == 1 ? s.height - 1 - y : y;
          const std::size_t sx = axis == 2 ? s.width - 1 - x : x;
          out.at(z, y, x) = volume.at(sz, sy, sx);
        }
  }
  if (u_noise < noise_prob) {
    std::normal_distribution<double> noise(0.0, noise_sigma);
    for (float& v : out.voxels) v = static_cast<float>(v + noise(rng));
  }
  return out;
}

void save_cohort(const Cohort& cohort, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = kCohortFormat;
  manifest["volume_order"] = {"tumor", "node1", "node2", "node3"};
  manifest["records"] = nlohmann::json::array();
  for (const auto& r : cohort) {
    const std::string blob = r.id + ".f32";
    {
      std::ofstream out(dir / blob, std::ios::binary | std::ios::trunc);
      if (!out) throw std::runtime_error("cannot write " + (dir / blob).string());
      write_f32_le(out, r.tumor.voxels);
      for (const auto& n : r.nodes) write_f32_le(out, n.voxels);
    }
    manifest["records"].push_back({
        {"id", r.id},
        {"label", r.label},
        {"volume_shape", {r.tumor.shape.depth, r.tumor.shape.height, r.tumor.shape.width}},
        {"volume_file", blob},
        {"clinical", r.clinical},
        {"hematology", r.hematology},
        {"radiomics", r.radiomics},
    });
  }
  const fs::path tmp = dir / "manifest.json.tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    out << manifest.dump(1) << '\n';
  }
  fs::rename(tmp, dir / "manifest.json");
}

Cohort load_cohort(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw ParseError("missing manifest.json in " + dir.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("manifest.json: " + std::string(e.what()));
  }
  if (manifest.value("format", "") != kCohortFormat)
    throw ParseError("manifest.json: unsupported format tag");

  Cohort cohort;
  for (const auto& j : manifest.at("records")) {
    const std::string id = j.value("id", std::string("<missing id>"));
    try {
      PatientRecord r;
      r.id = j.at("id").get<std::string>();
      r.label = j.at("label").get<int>();
      if (r.label != 0 && r.label != 1) throw ParseError("record " + id + ": label must be 0 or 1");
      const auto shape = j.at("volume_shape").get<std::vector<std::size_t>>();
      if (shape.size() != 3) throw ParseError("record " + id + ": volume_shape must have 3 entries");
      const GridShape g{shape[0], shape[1], shape[2]};
      r.clinical = finite_vector(j, "clinical", id);
      r.hematology = finite_vector(j, "hematology", id);
      r.radiomics = finite_vector(j, "radiomics", id);

      const auto blob = dir / j.at("volume_file").get<std::string>();
      std::ifstream vin(blob, std::ios::binary);
      if (!vin) throw ParseError("record " + id + ": cannot open " + blob.string());
      std::vector<char> bytes((std::istreambuf_iterator<char>(vin)), std::istreambuf_iterator<char>());
      const std::size_t expected = (1 + kNodeVolumes) * g.voxels() * sizeof(float);
      if (bytes.size() != expected)
        throw ParseError("record " + id + ": volume payload has " + std::to_string(bytes.size()) +
                         " bytes, expected " + std::to_string(expected));
      const std::size_t stride = g.voxels() * sizeof(float);
      r.tumor = {g, read_f32_le(bytes, 0, g.voxels())};
      for (std::size_t n = 0; n < kNodeVolumes; ++n)
        r.nodes[n] = {g, read_f32_le(bytes, (n + 1) * stride, g.voxels())};
      cohort.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("record " + id + ": " + e.what());
    }
  }
  return cohort;
}

}  // namespace mmfusion::cohort
