#include "reid/teacher.hpp"

#include <atomic>

namespace reid {

namespace {

std::uint64_t next_identity() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1);
}

}  // namespace

ParameterStore::ParameterStore() : identity_(next_identity()) {}

ParameterStore::ParameterStore(const ParameterStore& other)
    : entries_(other.entries_), identity_(next_identity()) {}

ParameterStore& ParameterStore::operator=(const ParameterStore& other) {
  if (this != &other) {
    entries_ = other.entries_;
    ++revision_;
  }
  return *this;
}

void ParameterStore::set(const std::string& name, Eigen::MatrixXd value) {
  entries_[name] = std::move(value);
  ++revision_;
}

const Eigen::MatrixXd& ParameterStore::at(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ShapeError("no parameter named '" + name + "'");
  return it->second;
}

Eigen::MatrixXd& ParameterStore::mutable_entry(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ShapeError("no parameter named '" + name + "'");
  ++revision_;
  return it->second;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [name, value] : entries_) n += static_cast<std::size_t>(value.size());
  return n;
}

ParameterStore ParameterStore::zeros_like() const {
  ParameterStore out;
  for (const auto& [name, value] : entries_) {
    out.entries_[name] = Eigen::MatrixXd::Zero(value.rows(), value.cols());
  }
  return out;
}

void ParameterStore::add_scaled(const ParameterStore& other, double scale) {
  require_congruent(*this, other, "add_scaled");
  for (auto& [name, value] : entries_) value += scale * other.entries_.at(name);
  ++revision_;
}

bool congruent(const ParameterStore& a, const ParameterStore& b) {
  if (a.size() != b.size()) return false;
  auto ia = a.entries().begin();
  auto ib = b.entries().begin();
  for (; ia != a.entries().end(); ++ia, ++ib) {
    if (ia->first != ib->first || ia->second.rows() != ib->second.rows() ||
        ia->second.cols() != ib->second.cols()) {
      return false;
    }
  }
  return true;
}

void require_congruent(const ParameterStore& a, const ParameterStore& b, const char* what) {
  if (!congruent(a, b)) throw CongruenceError(std::string(what) + ": parameter stores are not congruent");
}

bool is_buffer(const std::string& name) { return name.find("running_") != std::string::npos; }

std::pair<ParameterStore, ParameterStore> init_copy(const ParameterStore& pretrained) {
  return {ParameterStore(pretrained), ParameterStore(pretrained)};
}

void ema_update(ParameterStore& teacher, const ParameterStore& student, double eta) {
  EmaConfig{eta}.validate();
  require_congruent(teacher, student, "ema_update");
  for (const auto& [name, value] : student.entries()) {
    auto& t = teacher.mutable_entry(name);
    t = eta * t + (1.0 - eta) * value;
  }
}

}  // namespace reid
