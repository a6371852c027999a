#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "refage/core/types.hpp"

namespace refage {

/// Writes `header.json`, `meta.jsonl` and `features.f32` (plus `tokens.f32`
/// when the dataset carries tokens) into directory `dir`. Output bytes are a
/// pure function of the dataset.
void write_dataset(const Dataset& dataset, const std::filesystem::path& dir);

/// Reads and re-validates a dataset directory. Each failure mode raises a
/// DatasetError with a distinct kind.
Dataset read_dataset(const std::filesystem::path& dir);

/// Raw little-endian float32 helpers shared with checkpoints.
void write_f32_file(const std::filesystem::path& path, std::span<const float> values);
std::vector<float> read_f32_file(const std::filesystem::path& path, std::size_t expected_count);

/// Hex SHA-256 of a byte string.
std::string sha256_hex(std::string_view bytes);

/// Hex SHA-256 over the dataset files in a fixed order.
std::string dataset_digest(const std::filesystem::path& dir);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, std::string_view text);

}  // namespace refage
