#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "unihead/numkit/errors.hpp"
#include "unihead/version.hpp"

namespace unihead {

/// Where a run's input came from.
struct InputSpec {
  std::string kind = "none";  // "file" | "synthetic" | "none"
  std::string path;
  std::size_t H = 0, W = 0, C = 0;
  std::uint64_t seed = 0;
  std::string distribution = "standard normal clipped to [-3, 3]";

  nlohmann::json to_json() const {
    if (kind == "file") return {{"kind", kind}, {"path", path}};
    if (kind == "synthetic")
      return {{"kind", kind}, {"H", H}, {"W", W}, {"C", C}, {"seed", seed}, {"distribution", distribution}};
    return {{"kind", kind}};
  }
};

/// One per run, written next to the run's outputs.
struct RunManifest {
  std::string command;
  std::vector<std::string> argv;
  std::string config_path;
  InputSpec input;
  std::vector<std::string> outputs;
  int exit_status = 0;
  std::string message;  // error text when exit_status != 0
  nlohmann::json extra = nlohmann::json::object();

  nlohmann::json to_json() const {
    nlohmann::json j{{"command", command},
                     {"argv", argv},
                     {"config_path", config_path},
                     {"input", input.to_json()},
                     {"outputs", outputs},
                     {"exit_status", exit_status},
                     {"tool_version", kVersion}};
    if (!message.empty()) j["message"] = message;
    for (const auto& [k, v] : extra.items()) j[k] = v;
    return j;
  }

  void write(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write manifest " + path.string());
    out << to_json().dump(2) << '\n';
    if (!out) throw IoError("write failed for " + path.string());
  }
};

inline nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace unihead
