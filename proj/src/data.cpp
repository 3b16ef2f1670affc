#include "hydra/data.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "hydra/binio.hpp"
#include "hydra/error.hpp"
#include "hydra/rng.hpp"

namespace hydra::data {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

std::string_view to_string(SetType s) { return s == SetType::closed ? "closed" : "open"; }

Counts Dataset::counts() const {
  Counts c;
  for (const EmbeddingRecord& r : records) {
    switch (r.split) {
      case Split::train: ++c.train; break;
      case Split::val: ++c.val; break;
      case Split::test:
        ++c.test;
        ++(r.set_type == SetType::open ? c.test_open : c.test_closed);
        break;
    }
  }
  return c;
}

std::vector<std::size_t> Dataset::indices(Split split, std::optional<SetType> set) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].split == split && (!set || records[i].set_type == *set)) out.push_back(i);
  }
  return out;
}

void validate_record(const EmbeddingRecord& r, const std::string& where) {
  const std::string who = where + "record '" + r.id + "': ";
  if (r.id.empty()) throw SchemaError(where + "record id is empty");
  if (r.embedding.empty()) throw SchemaError(who + "embedding is empty");
  for (float v : r.embedding) {
    if (!std::isfinite(v)) throw SchemaError(who + "embedding has a non-finite entry");
  }
  if (!(std::isfinite(r.sr_hz) && r.sr_hz > 0.0)) throw SchemaError(who + "sr_hz must be positive");
  if (!(std::isfinite(r.bps) && r.bps > 0.0)) throw SchemaError(who + "bps must be positive");
  if (r.q == 0) throw SchemaError(who + "q must be a positive integer");
  if (r.set_type == SetType::open && r.split != Split::test) {
    throw ProtocolError(who + "open-set record in split '" + std::string(to_string(r.split)) + "'");
  }
}

namespace {

const std::set<std::string> kManifestFields{"id",  "embedding", "embedding_ref", "sr_hz",   "bps",
                                            "q",   "codec_name", "split",        "set_type"};

Split parse_split(const std::string& s, const std::string& where) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw SchemaError(where + "unknown split '" + s + "'");
}

SetType parse_set_type(const std::string& s, const std::string& where) {
  if (s == "closed") return SetType::closed;
  if (s == "open") return SetType::open;
  throw SchemaError(where + "unknown set_type '" + s + "'");
}

using TypeCheck = bool (json::*)() const noexcept;

const json& field(const json& obj, const char* name, TypeCheck check, const std::string& where) {
  const auto it = obj.find(name);
  if (it == obj.end()) throw SchemaError(where + "missing field '" + name + "'");
  if (!((*it).*check)()) throw SchemaError(where + "field '" + name + "' has the wrong type");
  return *it;
}

class MatrixCache {
 public:
  explicit MatrixCache(fs::path base) : base_(std::move(base)) {}

  std::vector<float> row(const std::string& file, std::int64_t row, const std::string& where) {
    const fs::path path = fs::path(file).is_absolute() ? fs::path(file) : base_ / file;
    auto it = cache_.find(path.string());
    if (it == cache_.end()) it = cache_.emplace(path.string(), read_embedding_matrix(path)).first;
    const EmbeddingMatrix& m = it->second;
    if (row < 0 || static_cast<std::size_t>(row) >= m.count) {
      throw SchemaError(where + "embedding_ref row " + std::to_string(row) + " outside " + path.string() + " (" +
                        std::to_string(m.count) + " rows)");
    }
    const auto first = m.values.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(row) * m.dim);
    return {first, first + static_cast<std::ptrdiff_t>(m.dim)};
  }

 private:
  fs::path base_;
  std::map<std::string, EmbeddingMatrix> cache_;
};

EmbeddingRecord parse_record(const json& obj, const std::string& where, MatrixCache& matrices) {
  if (!obj.is_object()) throw SchemaError(where + "record is not an object");
  for (const auto& [key, _] : obj.items()) {
    if (!kManifestFields.count(key)) throw SchemaError(where + "unknown field '" + key + "'");
  }
  EmbeddingRecord r;
  r.id = field(obj, "id", &json::is_string, where).get<std::string>();
  const std::string who = where + "record '" + r.id + "': ";
  r.sr_hz = field(obj, "sr_hz", &json::is_number, who).get<double>();
  r.bps = field(obj, "bps", &json::is_number, who).get<double>();
  const json& q = field(obj, "q", &json::is_number, who);
  if (!q.is_number_integer() || q.get<std::int64_t>() <= 0 || q.get<std::int64_t>() > UINT32_MAX) {
    throw SchemaError(who + "q must be a positive integer");
  }
  r.q = static_cast<std::uint32_t>(q.get<std::int64_t>());
  r.codec_name = field(obj, "codec_name", &json::is_string, who).get<std::string>();
  r.split = parse_split(field(obj, "split", &json::is_string, who).get<std::string>(), who);
  r.set_type = parse_set_type(field(obj, "set_type", &json::is_string, who).get<std::string>(), who);

  const bool inline_emb = obj.contains("embedding"), ref = obj.contains("embedding_ref");
  if (inline_emb == ref) throw SchemaError(who + "exactly one of 'embedding' and 'embedding_ref' is required");
  if (inline_emb) {
    const json& e = field(obj, "embedding", &json::is_array, who);
    r.embedding.reserve(e.size());
    for (const json& v : e) {
      if (!v.is_number()) throw SchemaError(who + "embedding entries must be numbers");
      r.embedding.push_back(static_cast<float>(v.get<double>()));
    }
  } else {
    const json& e = field(obj, "embedding_ref", &json::is_object, who);
    const std::string file = field(e, "file", &json::is_string, who).get<std::string>();
    const json& row = field(e, "row", &json::is_number_integer, who);
    r.embedding = matrices.row(file, row.get<std::int64_t>(), who);
  }
  return r;
}

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

Dataset load_manifest(const fs::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw DataError("cannot open manifest " + manifest.string());
  MatrixCache matrices(manifest.parent_path());
  Dataset ds;
  std::unordered_set<std::string> ids;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(std::move(line));
    if (line.empty()) continue;
    const std::string where = manifest.string() + ":" + std::to_string(lineno) + ": ";
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw DataError(where + "malformed record: " + e.what());
    }
    EmbeddingRecord r = parse_record(obj, where, matrices);
    validate_record(r, where);
    if (ds.records.empty()) {
      ds.dim = r.embedding.size();
    } else if (r.embedding.size() != ds.dim) {
      throw SchemaError(where + "record '" + r.id + "': embedding dimension " + std::to_string(r.embedding.size()) +
                        " differs from " + std::to_string(ds.dim));
    }
    if (!ids.insert(r.id).second) throw SchemaError(where + "duplicate record id '" + r.id + "'");
    ds.records.push_back(std::move(r));
  }
  return ds;
}

void write_embedding_matrix(const fs::path& path, std::size_t dim, const std::vector<float>& values) {
  if (dim == 0 || values.size() % dim != 0) throw UsageError("embedding matrix size is not a multiple of dim");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write("HEMB", 4);
  binio::write_le<std::uint32_t>(out, kEmbeddingFormatVersion);
  binio::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(dim));
  binio::write_le<std::uint64_t>(out, values.size() / dim);
  for (float v : values) binio::write_le(out, v);
  if (!out) throw IoError("write failed for " + path.string());
}

namespace {

EmbeddingMatrix read_csv_matrix(std::istream& in, const std::string& name) {
  EmbeddingMatrix m;
  std::string line;
  if (!std::getline(in, line) || trim(line).rfind("id,dim", 0) != 0) {
    throw DataError(name + ": neither HEMB nor CSV with an 'id,dim' header");
  }
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = name + ":" + std::to_string(lineno) + ": ";
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(trim(cell));
    if (cells.size() < 3) throw DataError(where + "expected id, dim and values");
    std::size_t dim = 0;
    try {
      dim = std::stoul(cells[1]);
    } catch (const std::exception&) {
      throw DataError(where + "bad dim '" + cells[1] + "'");
    }
    if (dim != cells.size() - 2) throw SchemaError(where + "dim " + cells[1] + " does not match the value count");
    if (m.count == 0) m.dim = dim;
    if (dim != m.dim) throw SchemaError(where + "inconsistent dim " + cells[1]);
    for (std::size_t j = 2; j < cells.size(); ++j) {
      try {
        std::size_t used = 0;
        m.values.push_back(std::stof(cells[j], &used));
        if (used != cells[j].size()) throw std::invalid_argument("trailing");
      } catch (const std::exception&) {
        throw DataError(where + "bad value '" + cells[j] + "'");
      }
    }
    m.ids.push_back(cells[0]);
    ++m.count;
  }
  return m;
}

}  // namespace

EmbeddingMatrix read_embedding_matrix(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open embedding file " + path.string());
  char magic[4] = {};
  in.read(magic, 4);
  if (in.gcount() != 4 || std::string_view(magic, 4) != "HEMB") {
    in.clear();
    in.seekg(0);
    return read_csv_matrix(in, path.string());
  }
  const std::string name = path.string();
  const auto version = binio::read_le<std::uint32_t>(in, name);
  if (version != kEmbeddingFormatVersion) throw DataError(name + ": unsupported HEMB version " + std::to_string(version));
  EmbeddingMatrix m;
  m.dim = binio::read_le<std::uint32_t>(in, name);
  m.count = binio::read_le<std::uint64_t>(in, name);
  if (m.dim == 0 && m.count > 0) throw DataError(name + ": zero dimension");
  m.values.resize(m.dim * m.count);
  for (float& v : m.values) v = binio::read_le<float>(in, name);
  if (in.peek() != std::char_traits<char>::eof()) throw DataError(name + ": trailing bytes after the matrix");
  return m;
}

fs::path write_dataset(const Dataset& ds, const fs::path& dir, const std::string& stem) {
  fs::create_directories(dir);
  const std::string emb_name = stem + ".hemb";
  std::vector<float> values;
  values.reserve(ds.records.size() * ds.dim);
  for (const EmbeddingRecord& r : ds.records) {
    if (r.embedding.size() != ds.dim) throw SchemaError("record '" + r.id + "' has the wrong embedding dimension");
    values.insert(values.end(), r.embedding.begin(), r.embedding.end());
  }
  if (!ds.records.empty()) write_embedding_matrix(dir / emb_name, ds.dim, values);

  const fs::path manifest = dir / (stem + ".jsonl");
  std::ofstream out(manifest, std::ios::trunc);
  if (!out) throw IoError("cannot write " + manifest.string());
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    const EmbeddingRecord& r = ds.records[i];
    json obj{{"id", r.id},
             {"embedding_ref", {{"file", emb_name}, {"row", i}}},
             {"sr_hz", r.sr_hz},
             {"bps", r.bps},
             {"q", r.q},
             {"codec_name", r.codec_name},
             {"split", to_string(r.split)},
             {"set_type", to_string(r.set_type)}};
    out << obj.dump() << '\n';
  }
  if (!out) throw IoError("write failed for " + manifest.string());
  return manifest;
}

LabelScaler::LabelScaler(std::array<double, 3> mean, std::array<double, 3> stddev, bool log_space)
    : mean_(mean), std_(stddev), log_space_(log_space) {
  for (double s : std_) {
    if (!(s > 0.0) || !std::isfinite(s)) throw ConfigError("label scaler standard deviation must be positive");
  }
}

LabelScaler LabelScaler::fit(const Dataset& ds, bool log_space) {
  static constexpr const char* kTasks[] = {"SR", "BPS", "Q"};
  const std::vector<std::size_t> train = ds.indices(Split::train);
  if (train.size() < 2) throw ConfigError("label scaler needs at least two training records");
  std::array<double, 3> mean{}, var{};
  for (std::size_t t = 0; t < 3; ++t) {
    auto value = [&](std::size_t i) {
      const double v = ds.records[i].labels()[t];
      return log_space ? std::log(v) : v;
    };
    double s = 0.0;
    for (std::size_t i : train) s += value(i);
    mean[t] = s / static_cast<double>(train.size());
    double ss = 0.0;
    for (std::size_t i : train) ss += (value(i) - mean[t]) * (value(i) - mean[t]);
    var[t] = ss / static_cast<double>(train.size() - 1);
    if (!(var[t] > 0.0)) {
      throw ConfigError(std::string("task ") + kTasks[t] + " has a constant label in the training split");
    }
  }
  return LabelScaler(mean, {std::sqrt(var[0]), std::sqrt(var[1]), std::sqrt(var[2])}, log_space);
}

double LabelScaler::normalize(std::size_t task, double native) const {
  const double v = log_space_ ? std::log(native) : native;
  return (v - mean_.at(task)) / std_.at(task);
}

double LabelScaler::denormalize(std::size_t task, double z) const {
  const double v = z * std_.at(task) + mean_.at(task);
  return log_space_ ? std::exp(v) : v;
}

void SynthConfig::validate() const {
  if (dim < 32) throw ConfigError("synthetic dim " + std::to_string(dim) + " is below 32");
  if (n_train < 2 || n_val == 0 || n_test == 0) throw ConfigError("synthetic splits need n_train >= 2, n_val, n_test > 0");
  if (family_count == 0) throw ConfigError("family_count must be positive");
  if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) throw ConfigError("noise_sigma must be >= 0");
  if (!(open_fraction >= 0.0 && open_fraction <= 1.0)) throw ConfigError("open_fraction must lie in [0, 1]");
}

namespace {

constexpr std::array<std::size_t, 3> kGridSize{kSynthSampleRates.size(), kSynthBitrates.size(),
                                               kSynthQuantizers.size()};

std::vector<GridTriple> one_step_variants(const GridTriple& base) {
  std::vector<GridTriple> out;
  for (std::size_t p = 0; p < 3; ++p) {
    if (base[p] > 0) {
      GridTriple v = base;
      --v[p];
      out.push_back(v);
    }
    if (base[p] + 1 < kGridSize[p]) {
      GridTriple v = base;
      ++v[p];
      out.push_back(v);
    }
  }
  return out;
}

std::vector<GridTriple> reachable_from(const GridTriple& base) {
  std::vector<GridTriple> r{base};
  for (const GridTriple& v : one_step_variants(base)) r.push_back(v);
  return r;
}

double grid_value(std::size_t param, std::size_t index) {
  switch (param) {
    case 0: return kSynthSampleRates[index];
    case 1: return kSynthBitrates[index];
    default: return kSynthQuantizers[index];
  }
}

// Position of a label on its grid's log scale, in [0, 1].
double log_position(std::size_t param, double value) {
  const double lo = std::log(grid_value(param, 0)), hi = std::log(grid_value(param, kGridSize[param] - 1));
  return (std::log(value) - lo) / (hi - lo);
}

}  // namespace

SynthDataset gen_synth(const SynthConfig& cfg) {
  cfg.validate();
  Rng structure(Rng::derive_seed(cfg.seed, 0));

  std::vector<GridTriple> grid;
  for (std::size_t a = 0; a < kGridSize[0]; ++a)
    for (std::size_t b = 0; b < kGridSize[1]; ++b)
      for (std::size_t c = 0; c < kGridSize[2]; ++c) grid.push_back({a, b, c});
  structure.shuffle(grid.begin(), grid.end());

  SynthDataset out;
  std::set<GridTriple> open_reach;
  std::vector<SynthFamily> open;
  for (std::size_t i = 0; i < kSynthOpenFamilies; ++i) {
    SynthFamily f{grid[i], true, reachable_from(grid[i])};
    open_reach.insert(f.reachable.begin(), f.reachable.end());
    open.push_back(std::move(f));
  }
  for (std::size_t i = kSynthOpenFamilies; i < grid.size() && out.families.size() < cfg.family_count; ++i) {
    SynthFamily f{grid[i], false, reachable_from(grid[i])};
    const bool clash = std::any_of(f.reachable.begin(), f.reachable.end(),
                                   [&](const GridTriple& t) { return open_reach.count(t) > 0; });
    if (!clash) out.families.push_back(std::move(f));
  }
  if (out.families.size() < cfg.family_count) {
    throw ConfigError("family_count " + std::to_string(cfg.family_count) + " exceeds the " +
                      std::to_string(out.families.size()) + " families disjoint from the held-out ones");
  }
  const std::size_t n_closed = out.families.size();
  for (SynthFamily& f : open) out.families.push_back(std::move(f));

  std::vector<std::array<double, kSynthFamilyDim>> directions(out.families.size());
  for (auto& dir : directions) {
    double norm = 0.0;
    for (double& v : dir) {
      v = structure.normal();
      norm += v * v;
    }
    for (double& v : dir) v /= std::sqrt(norm);
  }
  std::vector<double> projection(cfg.dim * kSynthRawDim);
  const double proj_scale = 1.0 / std::sqrt(static_cast<double>(kSynthRawDim));
  for (double& v : projection) v = structure.normal() * proj_scale;

  Rng sampler(Rng::derive_seed(cfg.seed, 1));
  Dataset& ds = out.dataset;
  ds.dim = cfg.dim;
  const auto n_open = static_cast<std::size_t>(std::llround(cfg.open_fraction * static_cast<double>(cfg.n_test)));
  std::vector<bool> test_open(cfg.n_test, false);
  std::fill(test_open.begin(), test_open.begin() + static_cast<std::ptrdiff_t>(n_open), true);
  sampler.shuffle(test_open.begin(), test_open.end());

  auto make = [&](Split split, std::size_t index, bool is_open) {
    const std::size_t f = is_open ? n_closed + sampler.below(kSynthOpenFamilies) : sampler.below(n_closed);
    const SynthFamily& fam = out.families[f];
    const std::vector<GridTriple> moves = one_step_variants(fam.base);
    const GridTriple triple = moves[sampler.below(moves.size())];

    EmbeddingRecord r;
    char id[32];
    std::snprintf(id, sizeof id, "%s-%06zu", std::string(to_string(split)).c_str(), index);
    r.id = id;
    r.sr_hz = grid_value(0, triple[0]);
    r.bps = grid_value(1, triple[1]);
    r.q = static_cast<std::uint32_t>(grid_value(2, triple[2]));
    const std::size_t local = is_open ? f - n_closed : f;
    r.codec_name = std::string("synth-") + (is_open ? "open-" : "closed-") + (local < 10 ? "0" : "") + std::to_string(local);
    r.split = split;
    r.set_type = is_open ? SetType::open : SetType::closed;

    std::array<double, kSynthRawDim> raw{};
    std::copy(directions[f].begin(), directions[f].end(), raw.begin());
    const std::array<double, 3> labels = r.labels();
    for (std::size_t p = 0; p < 3; ++p) {
      const double s = log_position(p, labels[p]);
      for (std::size_t k = 0; k < kSynthFrequencies; ++k) {
        raw[kSynthFamilyDim + p * kSynthFrequencies + k] =
            std::sin(static_cast<double>(k + 1) * std::numbers::pi / 2.0 * s);
      }
    }
    if (cfg.noise_sigma > 0.0)
      for (double& v : raw) v += cfg.noise_sigma * sampler.normal();
    r.embedding.resize(cfg.dim);
    for (std::size_t j = 0; j < cfg.dim; ++j) {
      double acc = 0.0;
      for (std::size_t i = 0; i < kSynthRawDim; ++i) acc += projection[j * kSynthRawDim + i] * raw[i];
      r.embedding[j] = static_cast<float>(acc);
    }
    ds.records.push_back(std::move(r));
  };

  ds.records.reserve(cfg.n_train + cfg.n_val + cfg.n_test);
  for (std::size_t i = 0; i < cfg.n_train; ++i) make(Split::train, i, false);
  for (std::size_t i = 0; i < cfg.n_val; ++i) make(Split::val, i, false);
  for (std::size_t i = 0; i < cfg.n_test; ++i) make(Split::test, i, test_open[i]);
  return out;
}

}  // namespace hydra::data
