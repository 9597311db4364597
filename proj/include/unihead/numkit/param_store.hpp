#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "unihead/numkit/errors.hpp"
#include "unihead/numkit/tape.hpp"
#include "unihead/numkit/tensor.hpp"
#include "unihead/numkit/uht.hpp"

namespace unihead {

/// Named weight tensors in registration order.
template <typename T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> value;
  };

  void add(std::string name, Tensor<T> value) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    index_.emplace(name, entries_.size());
    entries_.push_back({std::move(name), std::move(value)});
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Tensor<T>& get(const std::string& name) const { return entries_.at(lookup(name)).value; }
  Tensor<T>& get(const std::string& name) { return entries_.at(lookup(name)).value; }

  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::size_t total_params() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  friend bool operator==(const ParamStore& a, const ParamStore& b) {
    if (a.entries_.size() != b.entries_.size()) return false;
    for (std::size_t i = 0; i < a.entries_.size(); ++i) {
      if (a.entries_[i].name != b.entries_[i].name || !(a.entries_[i].value == b.entries_[i].value)) return false;
    }
    return true;
  }

  /// Directory of UHT files plus manifest.json mapping names to files.
  void save(const std::filesystem::path& dir) const {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    nlohmann::json manifest;
    manifest["format"] = "unihead-params";
    manifest["dtype"] = uht::dtype_of<T>() == uht::DType::f64 ? "f64" : "f32";
    manifest["params"] = nlohmann::json::array();
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const auto& e = entries_[i];
      const std::string file = std::to_string(i) + "_" + sanitize(e.name) + ".uht";
      uht::save(dir / file, e.value);
      manifest["params"].push_back({{"name", e.name}, {"file", file}, {"shape", e.value.shape()}});
    }
    uht::write_file(dir / "manifest.json", to_bytes(manifest.dump(2) + "\n"));
  }

  static ParamStore load(const std::filesystem::path& dir) {
    const auto raw = uht::read_file(dir / "manifest.json");
    nlohmann::json manifest;
    try {
      manifest = nlohmann::json::parse(raw.begin(), raw.end());
    } catch (const nlohmann::json::exception& e) {
      throw IoError("bad parameter manifest: " + std::string(e.what()));
    }
    ParamStore store;
    for (const auto& p : manifest.at("params")) {
      auto decoded = uht::load(dir / p.at("file").get<std::string>());
      store.add(p.at("name").get<std::string>(), decoded.values.template cast<T>());
    }
    return store;
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }

  static std::string sanitize(std::string s) {
    for (char& ch : s)
      if (ch == '/' || ch == '\\') ch = '_';
    return s;
  }

  static uht::Bytes to_bytes(const std::string& s) { return uht::Bytes(s.begin(), s.end()); }

  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Puts parameter tensors on a tape as named leaves.
template <typename T>
class Binder {
 public:
  Binder(Tape<T>& tape, bool requires_grad) : tape_(tape), requires_grad_(requires_grad) {}

  /// Names found in `preset` resolve to those Vars instead of fresh leaves.
  Binder(Tape<T>& tape, std::map<std::string, Var> preset) : tape_(tape), requires_grad_(false), preset_(std::move(preset)) {}

  Var operator()(const std::string& name, const Tensor<T>& value) {
    auto it = preset_.find(name);
    Var v = it != preset_.end() ? it->second : tape_.leaf(value, requires_grad_);
    bound_.emplace_back(name, v);
    return v;
  }

  Tape<T>& tape() { return tape_; }
  const std::vector<std::pair<std::string, Var>>& bound() const { return bound_; }

 private:
  Tape<T>& tape_;
  bool requires_grad_;
  std::vector<std::pair<std::string, Var>> bound_;
  std::map<std::string, Var> preset_;
};

}  // namespace unihead
