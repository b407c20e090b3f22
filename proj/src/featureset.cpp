#include "reid/featureset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>
#include <set>

#include "reid/rng.hpp"

namespace reid {

namespace {

constexpr char kMagic[] = "FSET1\n";
constexpr std::size_t kMagicSize = 6;

class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
  }
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void raw(const char* data, std::size_t n) { bytes_.insert(bytes_.end(), data, data + n); }
  const std::vector<char>& bytes() const { return bytes_; }

 private:
  std::vector<char> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<char> bytes) : bytes_(std::move(bytes)) {}

  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw FormatError("FEATSET: truncated file");
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(bytes_[pos_++]);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += 4;
    return v;
  }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string_view raw(std::size_t n) {
    need(n);
    std::string_view out(bytes_.data() + pos_, n);
    pos_ += n;
    return out;
  }
  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  std::vector<char> bytes_;
  std::size_t pos_ = 0;
};

std::vector<char> read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_all(const std::filesystem::path& path, const std::vector<char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed for " + path.string());
}

std::optional<std::int32_t> optional_field(std::int32_t raw) {
  if (raw == -1) return std::nullopt;
  return raw;
}

}  // namespace

std::size_t FeatureShape::size() const {
  if (dims.empty()) return 0;
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

bool SampleRecord::operator==(const SampleRecord& other) const {
  if (id != other.id || identity != other.identity || camera != other.camera ||
      domain != other.domain || values.size() != other.values.size()) {
    return false;
  }
  // Bitwise payload comparison so that round trips are checked exactly.
  for (Index i = 0; i < values.size(); ++i) {
    if (std::bit_cast<std::uint32_t>(values[i]) != std::bit_cast<std::uint32_t>(other.values[i])) {
      return false;
    }
  }
  return true;
}

std::int64_t count_identities(std::span<const SampleRecord> records) {
  std::set<std::int32_t> ids;
  for (const auto& r : records) {
    if (r.identity) ids.insert(*r.identity);
  }
  return static_cast<std::int64_t>(ids.size());
}

void validate_split(const DatasetSplit& split) {
  for (const auto* part : {&split.train, &split.gallery, &split.query}) {
    for (const auto& r : *part) {
      if (r.domain == Domain::kSource && !r.identity) {
        throw DataError("source record " + std::to_string(r.id) + " has no identity");
      }
    }
  }
  std::set<std::int32_t> gallery_ids;
  for (const auto& r : split.gallery) {
    if (r.identity) gallery_ids.insert(*r.identity);
  }
  for (const auto& q : split.query) {
    if (!q.identity || !gallery_ids.contains(*q.identity)) {
      throw DataError("query record " + std::to_string(q.id) + " has no gallery match");
    }
  }
  if (split.identity_count != count_identities(split.train)) {
    throw DataError("identity_count does not match the train partition");
  }
}

void save_featset(const FeatureSet& set, const std::filesystem::path& path) {
  const auto rank = set.shape.rank();
  if (rank != 1 && rank != 3) throw ShapeError("FEATSET shape rank must be 1 or 3");
  const auto n = set.shape.size();
  if (n == 0) throw ShapeError("FEATSET shape has a zero dimension");

  ByteWriter w;
  w.raw(kMagic, kMagicSize);
  w.u32(static_cast<std::uint32_t>(set.records.size()));
  w.u32(static_cast<std::uint32_t>(rank));
  for (auto d : set.shape.dims) w.u32(d);
  for (const auto& r : set.records) {
    if (static_cast<std::size_t>(r.values.size()) != n) {
      throw ShapeError("record " + std::to_string(r.id) + " does not match the set shape");
    }
    w.u32(r.id);
    w.i32(r.identity.value_or(-1));
    w.i32(r.camera.value_or(-1));
    w.u8(static_cast<std::uint8_t>(r.domain));
    for (Index i = 0; i < r.values.size(); ++i) w.f32(r.values[i]);
  }
  write_all(path, w.bytes());
}

FeatureSet load_featset(const std::filesystem::path& path) {
  ByteReader in(read_all(path));
  if (in.raw(kMagicSize) != std::string_view(kMagic, kMagicSize)) {
    throw FormatError("FEATSET: bad magic in " + path.string());
  }
  FeatureSet set;
  const auto count = in.u32();
  const auto rank = in.u32();
  if (rank != 1 && rank != 3) throw FormatError("FEATSET: shape rank must be 1 or 3");
  for (std::uint32_t i = 0; i < rank; ++i) {
    const auto d = in.u32();
    if (d == 0) throw FormatError("FEATSET: zero shape dimension");
    set.shape.dims.push_back(d);
  }
  const auto n = set.shape.size();
  set.records.reserve(count);
  for (std::uint32_t k = 0; k < count; ++k) {
    SampleRecord r;
    r.id = in.u32();
    r.identity = optional_field(in.i32());
    r.camera = optional_field(in.i32());
    const auto domain = in.u8();
    if (domain > 1) throw FormatError("FEATSET: domain byte must be 0 or 1");
    r.domain = static_cast<Domain>(domain);
    r.values.resize(static_cast<Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
      const float v = in.f32();
      if (!std::isfinite(v)) {
        throw DataError("FEATSET: non-finite value in record " + std::to_string(r.id));
      }
      r.values[static_cast<Index>(i)] = v;
    }
    set.records.push_back(std::move(r));
  }
  if (!in.at_end()) throw FormatError("FEATSET: trailing bytes after last record");
  return set;
}

std::filesystem::path split_part_path(const std::filesystem::path& stem, const std::string& part) {
  return std::filesystem::path(stem.string() + "." + part + ".fset");
}

void save_split(const DatasetSplit& split, const std::filesystem::path& stem) {
  save_featset({split.shape, split.train}, split_part_path(stem, "train"));
  save_featset({split.shape, split.query}, split_part_path(stem, "query"));
  save_featset({split.shape, split.gallery}, split_part_path(stem, "gallery"));
}

DatasetSplit load_split(const std::filesystem::path& stem) {
  auto train = load_featset(split_part_path(stem, "train"));
  auto query = load_featset(split_part_path(stem, "query"));
  auto gallery = load_featset(split_part_path(stem, "gallery"));
  // Empty parts carry whatever shape they were written with; only non-empty
  // parts have to agree.
  DatasetSplit split;
  split.shape = train.shape;
  for (const auto* part : {&query, &gallery}) {
    if (!part->records.empty() && part->shape != split.shape) {
      if (train.records.empty()) {
        split.shape = part->shape;
      } else {
        throw ShapeError("split parts of " + stem.string() + " disagree on feature shape");
      }
    }
  }
  split.train = std::move(train.records);
  split.query = std::move(query.records);
  split.gallery = std::move(gallery.records);
  split.identity_count = count_identities(split.train);
  return split;
}

void write_sidecar(const std::filesystem::path& featset_path, const std::string& json_text) {
  auto meta = featset_path;
  meta.replace_extension(".meta.json");
  std::ofstream out(meta, std::ios::trunc);
  if (!out) throw DataError("cannot write " + meta.string());
  out << json_text << '\n';
}

Eigen::MatrixXd feature_matrix(std::span<const SampleRecord> records) {
  if (records.empty()) return {};
  Eigen::MatrixXd out(records.front().values.size(), static_cast<Index>(records.size()));
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].values.size() != out.rows()) throw ShapeError("records disagree on feature size");
    out.col(static_cast<Index>(i)) = records[i].values.cast<double>();
  }
  return out;
}

namespace {

struct DomainGenerator {
  Eigen::MatrixXd basis;  // dim x latent
  Eigen::VectorXd offset;
};

void emit_identity(const DomainGenerator& gen, const SynthConfig& cfg, Domain domain,
                   std::int32_t label, Pcg32& rng, std::int32_t count, bool query_camera,
                   std::vector<SampleRecord>& out, std::uint32_t& next_id,
                   const Eigen::VectorXd& latent) {
  const Eigen::VectorXd centre = gen.basis * latent + gen.offset;
  for (std::int32_t s = 0; s < count; ++s) {
    SampleRecord r;
    r.id = next_id++;
    r.identity = label;
    const std::int32_t spare_cameras = std::max(1, cfg.cameras - 1);
    r.camera = query_camera ? 0 : 1 + s % spare_cameras;
    r.domain = domain;
    Eigen::VectorXd noise(cfg.dim), clutter(cfg.dim);
    for (std::int32_t d = 0; d < cfg.dim; ++d) noise[d] = rng.normal();
    for (std::int32_t d = 0; d < cfg.dim; ++d) clutter[d] = rng.normal();
    clutter -= gen.basis * (gen.basis.transpose() * clutter);
    r.values = (centre + cfg.noise_scale * noise + cfg.nuisance_scale * clutter).cast<float>();
    out.push_back(std::move(r));
  }
}

DatasetSplit generate_domain(const DomainGenerator& gen, const SynthConfig& cfg, Domain domain,
                             std::int32_t label_base, Pcg32 rng) {
  const Index latent_dim = gen.basis.cols();
  DatasetSplit split;
  split.shape = FeatureShape::vector(static_cast<std::uint32_t>(cfg.dim));
  std::uint32_t train_id = 0;
  std::uint32_t query_id = 0;
  std::uint32_t gallery_id = 0;
  auto draw_latent = [&]() {
    Eigen::VectorXd u(latent_dim);
    for (Index i = 0; i < latent_dim; ++i) u[i] = rng.normal();
    return u;
  };
  for (std::int32_t k = 0; k < cfg.identities; ++k) {
    const auto u = draw_latent();
    emit_identity(gen, cfg, domain, label_base + k, rng, cfg.samples_per_id, false, split.train,
                  train_id, u);
  }
  for (std::int32_t k = 0; k < cfg.test_identities; ++k) {
    const auto u = draw_latent();
    const std::int32_t label = label_base + cfg.identities + k;
    emit_identity(gen, cfg, domain, label, rng, cfg.query_per_id, true, split.query, query_id, u);
    emit_identity(gen, cfg, domain, label, rng, cfg.gallery_per_id, false, split.gallery,
                  gallery_id, u);
  }
  split.identity_count = count_identities(split.train);
  return split;
}

}  // namespace

std::pair<DatasetSplit, DatasetSplit> synth_generate(const SynthConfig& config) {
  if (config.identities < 2 || config.samples_per_id < 2) {
    throw ConfigError("synth_generate needs identities >= 2 and samples_per_id >= 2");
  }
  if (config.dim < 2) throw ConfigError("synth_generate needs dim >= 2");
  if (config.test_identities > 0 && (config.query_per_id < 1 || config.gallery_per_id < 1)) {
    throw ConfigError("evaluation identities need at least one query and one gallery sample");
  }
  Pcg32 root(config.seed);
  Pcg32 basis_rng = root.split();
  Pcg32 source_rng = root.split();
  Pcg32 target_rng = root.split();

  const Index dim = config.dim;
  const Index half = (dim + 1) / 2;
  const Index latent = config.latent_dim > 0 ? config.latent_dim
                                             : std::max<Index>(1, std::min<Index>(dim / 4, (half - 1) / 2));
  if (2 * latent + 1 > half) throw ConfigError("latent_dim too large: need 2 * latent_dim + 1 <= ceil(dim / 2)");

  // Orthonormal basis of reversal-symmetric vectors (x == x.reverse()).
  Eigen::MatrixXd symmetric = Eigen::MatrixXd::Zero(dim, half);
  for (Index i = 0; i < dim / 2; ++i) {
    symmetric(i, i) = std::sqrt(0.5);
    symmetric(dim - 1 - i, i) = std::sqrt(0.5);
  }
  if (dim % 2 == 1) symmetric(dim / 2, half - 1) = 1.0;
  Eigen::MatrixXd gaussian(half, half);
  for (Index j = 0; j < half; ++j) {
    for (Index i = 0; i < half; ++i) gaussian(i, j) = basis_rng.normal();
  }
  const Eigen::MatrixXd rotation = Eigen::HouseholderQR<Eigen::MatrixXd>(gaussian).householderQ();
  const Eigen::MatrixXd q = symmetric * rotation;

  const double s = config.domain_shift_scale;
  const double theta = 0.5 * std::numbers::pi * s / (1.0 + s);
  DomainGenerator source{q.leftCols(latent), Eigen::VectorXd::Zero(dim)};
  DomainGenerator target{std::cos(theta) * q.leftCols(latent) +
                             std::sin(theta) * q.middleCols(latent, latent),
                         0.5 * s * q.col(2 * latent)};

  const std::int32_t source_labels = config.identities + config.test_identities;
  auto src = generate_domain(source, config, Domain::kSource, 0, source_rng);
  auto tgt = generate_domain(target, config, Domain::kTarget, source_labels, target_rng);
  return {std::move(src), std::move(tgt)};
}

}  // namespace reid
