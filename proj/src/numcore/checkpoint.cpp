#include "refage/numcore/checkpoint.hpp"

#include "refage/core/dataset_io.hpp"
#include "refage/core/errors.hpp"

namespace refage::num {

namespace fs = std::filesystem;
using json = nlohmann::json;

void write_checkpoint(const Checkpoint& ckpt, const fs::path& dir) {
  fs::create_directories(dir);
  json header;
  header["format_version"] = 1;
  header["config"] = ckpt.config;
  header["step"] = ckpt.step;
  header["ema"] = ckpt.ema;
  json tensors = json::array();
  for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
    const std::string file = ckpt.params.names[i] + ".f32";
    tensors.push_back({{"name", ckpt.params.names[i]}, {"shape", ckpt.params.shapes[i]}, {"file", file}});
    write_f32_file(dir / file, ckpt.params.values[i]);
  }
  header["tensors"] = tensors;
  write_text_file(dir / "header.json", header.dump(2) + "\n");
}

Checkpoint read_checkpoint(const fs::path& dir) {
  const fs::path header_path = dir / "header.json";
  if (!fs::exists(header_path)) {
    throw DatasetError(DatasetError::Kind::kMissingFile, "missing checkpoint header " + header_path.string());
  }
  json header;
  try {
    header = json::parse(read_text_file(header_path));
  } catch (const json::exception& e) {
    throw DatasetError(DatasetError::Kind::kParse, "checkpoint header: " + std::string(e.what()));
  }
  if (header.value("format_version", 0) != 1) {
    throw DatasetError(DatasetError::Kind::kUnknownVersion, "unknown checkpoint format version");
  }
  Checkpoint ckpt;
  try {
    ckpt.config = header.at("config");
    ckpt.step = header.at("step").get<std::int64_t>();
    ckpt.ema = header.at("ema").get<bool>();
    for (const auto& t : header.at("tensors")) {
      Shape shape = t.at("shape").get<Shape>();
      auto data = read_f32_file(dir / t.at("file").get<std::string>(), numel(shape));
      ckpt.params.add(t.at("name").get<std::string>(), std::move(shape), std::move(data));
    }
  } catch (const json::exception& e) {
    throw DatasetError(DatasetError::Kind::kParse, "checkpoint header: " + std::string(e.what()));
  }
  return ckpt;
}

}  // namespace refage::num
