#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <map>
#include <string>
#include <utility>

#include "reid/errors.hpp"

namespace reid {

/// Named parameter arrays, ordered by name. Every entry is a dense matrix;
/// vectors are stored as n x 1.
///
/// Mutation goes through mutable_entry()/set(), which bump revision() so that
/// cached activations can detect that they were computed with older weights.
class ParameterStore {
 public:
  using Entries = std::map<std::string, Eigen::MatrixXd>;

  ParameterStore();
  ParameterStore(const ParameterStore& other);
  ParameterStore& operator=(const ParameterStore& other);
  ParameterStore(ParameterStore&&) noexcept = default;
  ParameterStore& operator=(ParameterStore&&) noexcept = default;

  void set(const std::string& name, Eigen::MatrixXd value);
  bool contains(const std::string& name) const { return entries_.contains(name); }
  const Eigen::MatrixXd& at(const std::string& name) const;
  Eigen::MatrixXd& mutable_entry(const std::string& name);

  const Entries& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const;

  /// Same names, same shapes, all zeros.
  ParameterStore zeros_like() const;

  /// Elementwise this += scale * other; stores must be congruent.
  void add_scaled(const ParameterStore& other, double scale);

  /// Unique per object instance (copies get a fresh identity).
  std::uint64_t identity() const { return identity_; }
  std::uint64_t revision() const { return revision_; }
  void touch() { ++revision_; }

  bool operator==(const ParameterStore& other) const { return entries_ == other.entries_; }

 private:
  Entries entries_;
  std::uint64_t identity_;
  std::uint64_t revision_ = 0;
};

/// Identical name sets and per-name shapes.
bool congruent(const ParameterStore& a, const ParameterStore& b);
void require_congruent(const ParameterStore& a, const ParameterStore& b, const char* what);

/// Buffers (running statistics) are carried and averaged but never optimised.
bool is_buffer(const std::string& name);

struct EmaConfig {
  double eta = 0.999;

  void validate() const {
    if (!(eta >= 0.0 && eta < 1.0)) throw ConfigError("EMA momentum must lie in [0, 1)");
  }
};

/// Independent student and teacher copies of a pre-trained store.
std::pair<ParameterStore, ParameterStore> init_copy(const ParameterStore& pretrained);

/// teacher <- eta * teacher + (1 - eta) * student, every entry.
void ema_update(ParameterStore& teacher, const ParameterStore& student, double eta);

}  // namespace reid
