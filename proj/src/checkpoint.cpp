#include "hydra/checkpoint.hpp"

#include <fstream>

#include "hydra/binio.hpp"
#include "hydra/error.hpp"

namespace hydra::checkpoint {

namespace fs = std::filesystem;

void save(const fs::path& path, const Entries& entries) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write("HYDC", 4);
  binio::write_le<std::uint32_t>(out, kVersion);
  binio::write_le<std::uint64_t>(out, entries.size());
  for (const auto& [name, tensor] : entries) {
    binio::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    binio::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensor.rank()));
    for (std::size_t extent : tensor.shape()) binio::write_le<std::uint64_t>(out, extent);
    for (double v : tensor.data()) binio::write_le(out, v);
  }
  if (!out) throw IoError("write failed for " + path.string());
}

Entries load(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  const std::string name = path.string();
  char magic[4] = {};
  in.read(magic, 4);
  if (in.gcount() != 4 || std::string_view(magic, 4) != "HYDC") throw DataError(name + ": not a HYDC checkpoint");
  const auto version = binio::read_le<std::uint32_t>(in, name);
  if (version != kVersion) throw DataError(name + ": unsupported checkpoint version " + std::to_string(version));
  const auto count = binio::read_le<std::uint64_t>(in, name);
  Entries entries;
  for (std::uint64_t e = 0; e < count; ++e) {
    const auto len = binio::read_le<std::uint32_t>(in, name);
    if (len > 4096) throw DataError(name + ": implausible entry name length");
    std::string key(len, '\0');
    if (!in.read(key.data(), len)) throw DataError(name + ": unexpected end of file");
    const auto rank = binio::read_le<std::uint32_t>(in, name);
    if (rank == 0 || rank > 8) throw DataError(name + ": entry '" + key + "' has rank " + std::to_string(rank));
    ad::Shape shape(rank);
    std::uint64_t numel = 1;
    for (std::size_t& extent : shape) {
      extent = binio::read_le<std::uint64_t>(in, name);
      if (extent == 0 || extent > (1ULL << 32)) throw DataError(name + ": entry '" + key + "' has a bad extent");
      numel *= extent;
    }
    if (numel > (1ULL << 31)) throw DataError(name + ": entry '" + key + "' is implausibly large");
    std::vector<double> values(numel);
    for (double& v : values) v = binio::read_le<double>(in, name);
    entries.emplace_back(std::move(key), ad::Tensor(std::move(shape), std::move(values)));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw DataError(name + ": trailing bytes after the last entry");
  return entries;
}

Entries pack(const model::Model& m, const data::LabelScaler& scaler) {
  Entries entries;
  for (const ad::Parameter& p : m.parameters()) entries.emplace_back(p.name, p.value);
  const auto& mean = scaler.mean();
  const auto& sd = scaler.stddev();
  entries.emplace_back("scaler.mean", ad::Tensor::vector({mean[0], mean[1], mean[2]}));
  entries.emplace_back("scaler.std", ad::Tensor::vector({sd[0], sd[1], sd[2]}));
  entries.emplace_back("scaler.log_space", ad::Tensor::scalar(scaler.log_space() ? 1.0 : 0.0));
  return entries;
}

data::LabelScaler unpack(const Entries& entries, model::Model& m) {
  Entries params;
  const ad::Tensor *mean = nullptr, *sd = nullptr, *log_space = nullptr;
  for (const auto& entry : entries) {
    if (entry.first == "scaler.mean") {
      mean = &entry.second;
    } else if (entry.first == "scaler.std") {
      sd = &entry.second;
    } else if (entry.first == "scaler.log_space") {
      log_space = &entry.second;
    } else {
      params.push_back(entry);
    }
  }
  if (!mean || !sd || !log_space || mean->numel() != 3 || sd->numel() != 3 || log_space->numel() != 1) {
    throw DataError("checkpoint lacks a valid label scaler");
  }
  m.load_state(params);
  return data::LabelScaler({(*mean)[0], (*mean)[1], (*mean)[2]}, {(*sd)[0], (*sd)[1], (*sd)[2]}, (*log_space)[0] != 0.0);
}

}  // namespace hydra::checkpoint
