#include "refage/core/dataset_io.hpp"

#include <openssl/evp.h>

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "json.hpp"
#include "refage/core/errors.hpp"

namespace refage {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr const char* kHeaderFile = "header.json";
constexpr const char* kMetaFile = "meta.jsonl";
constexpr const char* kFeaturesFile = "features.f32";
constexpr const char* kTokensFile = "tokens.f32";

std::uint32_t to_little_endian(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
  }
}

json header_to_json(const DatasetHeader& h) {
  json j;
  j["dim"] = h.dim;
  j["count"] = h.count;
  j["seed"] = h.seed;
  j["world_digest"] = h.world_digest;
  j["split"] = h.split;
  j["format_version"] = h.format_version;
  j["age_lo"] = h.age_lo;
  j["age_hi"] = h.age_hi;
  j["tokens_per_image"] = h.tokens_per_image;
  return j;
}

json record_to_json(const ImageRecord& r) {
  json j;
  j["image_id"] = r.image_id;
  j["identity_id"] = r.identity_id;
  j["age_years"] = r.age_years;
  j["source_id"] = r.source_id;
  j["domain_id"] = r.domain_id;
  j["quality"] = r.quality;
  j["feature_row"] = r.feature_row;
  return j;
}

template <class V>
V field(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) {
    throw DatasetError(DatasetError::Kind::kParse, where + ": missing key '" + key + "'");
  }
  try {
    return j.at(key).get<V>();
  } catch (const json::exception& e) {
    throw DatasetError(DatasetError::Kind::kParse, where + ": bad value for '" + key + "': " + e.what());
  }
}

void require_file(const fs::path& p) {
  if (!fs::exists(p)) {
    throw DatasetError(DatasetError::Kind::kMissingFile, "missing file " + p.string());
  }
}

}  // namespace

std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError(DatasetError::Kind::kMissingFile, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_text_file(const fs::path& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DatasetError(DatasetError::Kind::kIo, "cannot write " + path.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw DatasetError(DatasetError::Kind::kIo, "write failed for " + path.string());
}

void write_f32_file(const fs::path& path, std::span<const float> values) {
  std::string bytes(values.size() * 4, '\0');
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::uint32_t le = to_little_endian(std::bit_cast<std::uint32_t>(values[i]));
    std::memcpy(bytes.data() + 4 * i, &le, 4);
  }
  write_text_file(path, bytes);
}

std::vector<float> read_f32_file(const fs::path& path, std::size_t expected_count) {
  require_file(path);
  const std::string bytes = read_text_file(path);
  if (bytes.size() != expected_count * 4) {
    throw DatasetError(DatasetError::Kind::kSizeMismatch,
                       path.filename().string() + " holds " + std::to_string(bytes.size()) +
                           " bytes, expected " + std::to_string(expected_count * 4));
  }
  std::vector<float> out(expected_count);
  for (std::size_t i = 0; i < expected_count; ++i) {
    std::uint32_t le;
    std::memcpy(&le, bytes.data() + 4 * i, 4);
    out[i] = std::bit_cast<float>(to_little_endian(le));
  }
  return out;
}

std::string sha256_hex(std::string_view bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256 failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[md[i] >> 4]);
    out.push_back(kHex[md[i] & 0xf]);
  }
  return out;
}

void write_dataset(const Dataset& dataset, const fs::path& dir) {
  dataset.validate();
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DatasetError(DatasetError::Kind::kIo, "cannot create " + dir.string() + ": " + ec.message());

  write_text_file(dir / kHeaderFile, header_to_json(dataset.header).dump(2) + "\n");

  std::string meta;
  for (const auto& r : dataset.records) {
    meta += record_to_json(r).dump();
    meta += '\n';
  }
  write_text_file(dir / kMetaFile, meta);
  write_f32_file(dir / kFeaturesFile, dataset.features.data());
  if (dataset.has_tokens()) {
    write_f32_file(dir / kTokensFile, dataset.tokens.data());
  } else if (fs::exists(dir / kTokensFile)) {
    fs::remove(dir / kTokensFile);
  }
}

Dataset read_dataset(const fs::path& dir) {
  const fs::path header_path = dir / kHeaderFile;
  require_file(header_path);
  json hj;
  try {
    hj = json::parse(read_text_file(header_path));
  } catch (const json::parse_error& e) {
    throw DatasetError(DatasetError::Kind::kParse, "header.json: " + std::string(e.what()));
  }

  Dataset ds;
  auto& h = ds.header;
  h.format_version = field<int>(hj, "format_version", "header.json");
  if (h.format_version != kFormatVersion) {
    throw DatasetError(DatasetError::Kind::kUnknownVersion,
                       "unknown format version " + std::to_string(h.format_version));
  }
  h.dim = field<std::size_t>(hj, "dim", "header.json");
  h.count = field<std::size_t>(hj, "count", "header.json");
  h.seed = field<std::uint64_t>(hj, "seed", "header.json");
  h.world_digest = field<std::string>(hj, "world_digest", "header.json");
  h.split = field<std::string>(hj, "split", "header.json");
  h.age_lo = field<int>(hj, "age_lo", "header.json");
  h.age_hi = field<int>(hj, "age_hi", "header.json");
  h.tokens_per_image = hj.value("tokens_per_image", std::size_t{0});

  const fs::path meta_path = dir / kMetaFile;
  require_file(meta_path);
  std::istringstream meta(read_text_file(meta_path));
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(meta, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = "meta.jsonl:" + std::to_string(lineno);
    json rj;
    try {
      rj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw DatasetError(DatasetError::Kind::kParse, where + ": " + e.what());
    }
    ImageRecord r;
    r.image_id = field<std::int64_t>(rj, "image_id", where);
    r.identity_id = field<std::int64_t>(rj, "identity_id", where);
    r.age_years = field<int>(rj, "age_years", where);
    r.source_id = field<std::int64_t>(rj, "source_id", where);
    r.domain_id = field<std::int64_t>(rj, "domain_id", where);
    r.quality = field<double>(rj, "quality", where);
    r.feature_row = field<std::size_t>(rj, "feature_row", where);
    ds.records.push_back(r);
  }
  if (ds.records.size() != h.count) {
    throw DatasetError(DatasetError::Kind::kSizeMismatch,
                       "meta.jsonl has " + std::to_string(ds.records.size()) + " records, header says " +
                           std::to_string(h.count));
  }

  ds.features = FeatureMatrix(h.count, h.dim, read_f32_file(dir / kFeaturesFile, h.count * h.dim));
  if (h.tokens_per_image > 0) {
    const std::size_t rows = h.count * h.tokens_per_image;
    ds.tokens = FeatureMatrix(rows, h.dim, read_f32_file(dir / kTokensFile, rows * h.dim));
  }
  ds.validate();
  return ds;
}

std::string dataset_digest(const fs::path& dir) {
  std::string all;
  for (const char* name : {kHeaderFile, kMetaFile, kFeaturesFile, kTokensFile}) {
    const fs::path p = dir / name;
    if (!fs::exists(p)) continue;
    all += name;
    all += '\0';
    all += read_text_file(p);
  }
  return sha256_hex(all);
}

}  // namespace refage
