#pragma once

// Embedding datasets: JSONL manifests, HEMB embedding matrices, label
// scaling and the synthetic hierarchical codec generator.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace hydra::data {

enum class Split { train, val, test };
enum class SetType { closed, open };

std::string_view to_string(Split s);
std::string_view to_string(SetType s);

struct EmbeddingRecord {
  std::string id;
  std::vector<float> embedding;
  double sr_hz = 0.0;
  double bps = 0.0;
  std::uint32_t q = 0;
  std::string codec_name;
  Split split = Split::train;
  SetType set_type = SetType::closed;

  // Labels in task order SR, BPS, Q.
  std::array<double, 3> labels() const { return {sr_hz, bps, static_cast<double>(q)}; }
};

struct Counts {
  std::size_t train = 0, val = 0, test = 0;
  std::size_t test_closed = 0, test_open = 0;
  std::size_t total() const { return train + val + test; }
};

struct Dataset {
  std::size_t dim = 0;
  std::vector<EmbeddingRecord> records;

  Counts counts() const;
  // Record indices in file order; `set` restricts to one partition.
  std::vector<std::size_t> indices(Split split, std::optional<SetType> set = std::nullopt) const;
};

// Throws DataError (with line numbers), SchemaError or ProtocolError.
Dataset load_manifest(const std::filesystem::path& manifest);

// Validates one record against the dataset invariants; `where` prefixes messages.
void validate_record(const EmbeddingRecord& r, const std::string& where);

// HEMB: "HEMB", u32 version 1, u32 dim, u64 count, count*dim f32 LE row-major.
inline constexpr std::uint32_t kEmbeddingFormatVersion = 1;

struct EmbeddingMatrix {
  std::size_t dim = 0;
  std::size_t count = 0;
  std::vector<float> values;
  std::vector<std::string> ids;  // CSV only
};

void write_embedding_matrix(const std::filesystem::path& path, std::size_t dim, const std::vector<float>& values);
// Reads HEMB, or the CSV fallback (header `id,dim,...`) when the magic is absent.
EmbeddingMatrix read_embedding_matrix(const std::filesystem::path& path);

// Writes `<dir>/<stem>.jsonl` with embedding_ref rows into `<dir>/<stem>.hemb`.
// Returns the manifest path.
std::filesystem::path write_dataset(const Dataset& ds, const std::filesystem::path& dir,
                                    const std::string& stem = "manifest");

class LabelScaler {
 public:
  // Fits on the train split only. Throws ConfigError for fewer than two
  // training records or a constant task label.
  static LabelScaler fit(const Dataset& ds, bool log_space = false);
  LabelScaler() = default;
  LabelScaler(std::array<double, 3> mean, std::array<double, 3> stddev, bool log_space);

  double normalize(std::size_t task, double native) const;
  double denormalize(std::size_t task, double z) const;

  const std::array<double, 3>& mean() const { return mean_; }
  const std::array<double, 3>& stddev() const { return std_; }
  bool log_space() const { return log_space_; }

 private:
  std::array<double, 3> mean_{};
  std::array<double, 3> std_{1.0, 1.0, 1.0};
  bool log_space_ = false;
};

inline constexpr std::array<double, 4> kSynthSampleRates{8000, 16000, 24000, 44100};
inline constexpr std::array<double, 5> kSynthBitrates{1500, 3000, 6000, 12000, 24000};
inline constexpr std::array<double, 5> kSynthQuantizers{2, 4, 8, 16, 32};
inline constexpr std::size_t kSynthOpenFamilies = 2;
inline constexpr std::size_t kSynthFrequencies = 8;
inline constexpr std::size_t kSynthFamilyDim = 8;
// Family direction plus one sinusoid per (label, frequency).
inline constexpr std::size_t kSynthRawDim = kSynthFamilyDim + 3 * kSynthFrequencies;

struct SynthConfig {
  std::size_t n_train = 8000;
  std::size_t n_val = 1000;
  std::size_t n_test = 2000;
  std::size_t dim = 128;
  std::size_t family_count = 8;  // closed-set families
  double noise_sigma = 0.1;
  double open_fraction = 0.25;  // share of the test split drawn from held-out families
  std::uint64_t seed = 0;

  // Throws ConfigError.
  void validate() const;
};

// Grid coordinates (SR, BPS, Q) of a codec triple.
using GridTriple = std::array<std::size_t, 3>;

struct SynthFamily {
  GridTriple base{};
  bool open = false;
  std::vector<GridTriple> reachable;  // base and every one-step variant
};

struct SynthDataset {
  Dataset dataset;
  std::vector<SynthFamily> families;  // closed families first, then open
};

SynthDataset gen_synth(const SynthConfig& cfg);

}  // namespace hydra::data
