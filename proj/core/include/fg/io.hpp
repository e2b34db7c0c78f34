#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

namespace fg {

/// Whole-file binary read/write; failures throw IoError.
std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& contents);

nlohmann::json read_json(const std::filesystem::path& path);
/// Pretty-printed with a trailing newline so reruns are byte-identical.
void write_json(const std::filesystem::path& path, const nlohmann::json& j);

/// FNV-1a 64-bit digest, hex encoded. Used to fingerprint artifacts in manifests.
std::string content_digest(const std::string& bytes);

}  // namespace fg
