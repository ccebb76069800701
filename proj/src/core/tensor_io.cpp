#include "sparsepat/core/tensor_io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "sparsepat/core/error.hpp"
#include "sparsepat/core/rng.hpp"

namespace sparsepat {

static_assert(std::endian::native == std::endian::little,
              "packed formats assume a little-endian host");

double l2_norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

double cosine(std::span<const double> a, std::span<const double> b) {
  const double na = l2_norm(a);
  const double nb = l2_norm(b);
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot(a, b) / (na * nb);
}

void normalize(std::span<double> v) {
  const double n = l2_norm(v);
  if (n == 0.0) return;
  for (double& x : v) x /= n;
}

double Rng::normal() {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

std::vector<std::size_t> Rng::sample_without_replacement(std::size_t n, std::size_t k) {
  // Partial Fisher-Yates over an index vector.
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  k = std::min(k, n);
  for (std::size_t i = 0; i < k; ++i) {
    std::swap(idx[i], idx[i + below(n - i)]);
  }
  idx.resize(k);
  return idx;
}

namespace binio {

void put_u8(std::string& out, std::uint8_t v) { out.push_back(static_cast<char>(v)); }

void put_u32(std::string& out, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}

void put_u64(std::string& out, std::uint64_t v) {
  char b[8];
  std::memcpy(b, &v, 8);
  out.append(b, 8);
}

void put_f32(std::string& out, float v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}

void put_str(std::string& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.append(s);
}

void Reader::need(std::size_t n) const {
  if (data_.size() - pos_ < n) throw ValidationError("binary file truncated");
}

std::uint8_t Reader::u8() {
  need(1);
  return static_cast<std::uint8_t>(data_[pos_++]);
}

std::uint32_t Reader::u32() {
  need(4);
  std::uint32_t v;
  std::memcpy(&v, data_.data() + pos_, 4);
  pos_ += 4;
  return v;
}

std::uint64_t Reader::u64() {
  need(8);
  std::uint64_t v;
  std::memcpy(&v, data_.data() + pos_, 8);
  pos_ += 8;
  return v;
}

float Reader::f32() {
  need(4);
  float v;
  std::memcpy(&v, data_.data() + pos_, 4);
  pos_ += 4;
  return v;
}

std::string Reader::str() {
  const auto n = u32();
  need(n);
  std::string s = data_.substr(pos_, n);
  pos_ += n;
  return s;
}

std::string read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PrerequisiteError("missing file " + path.string(), "");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_atomic(const std::filesystem::path& path, const std::string& data) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    out.flush();
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace binio

namespace {
constexpr char kMagic[4] = {'S', 'P', 'T', 'C'};
}

const Matrix& TensorFile::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw ValidationError("tensor '" + name + "' missing from container");
  return it->second;
}

void write_tensor_file(const std::filesystem::path& path, const TensorFile& file) {
  std::string out(kMagic, 4);
  binio::put_u32(out, TensorFile::kVersion);
  binio::put_u32(out, static_cast<std::uint32_t>(file.tensors.size()));
  for (const auto& [name, m] : file.tensors) {
    binio::put_str(out, name);
    binio::put_u32(out, 2);
    binio::put_u64(out, m.rows());
    binio::put_u64(out, m.cols());
    for (double v : m.data()) binio::put_f32(out, static_cast<float>(v));
  }
  binio::write_atomic(path, out);
}

TensorFile read_tensor_file(const std::filesystem::path& path) {
  binio::Reader in(binio::read_all(path));
  char magic[4];
  for (char& c : magic) c = static_cast<char>(in.u8());
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw ValidationError(path.string() + ": not a tensor container");
  }
  const auto version = in.u32();
  if (version != TensorFile::kVersion) {
    throw ValidationError(path.string() + ": unsupported container version " +
                          std::to_string(version));
  }
  TensorFile file;
  const auto count = in.u32();
  for (std::uint32_t t = 0; t < count; ++t) {
    auto name = in.str();
    const auto rank = in.u32();
    if (rank != 2) throw ValidationError(path.string() + ": tensor rank must be 2");
    const auto rows = in.u64();
    const auto cols = in.u64();
    Matrix m(rows, cols);
    for (double& v : m.data()) v = in.f32();
    file.tensors.emplace(std::move(name), std::move(m));
  }
  if (!in.at_end()) throw ValidationError(path.string() + ": trailing bytes");
  return file;
}

void round_to_float(Matrix& m) {
  for (double& v : m.data()) v = static_cast<float>(v);
}

}  // namespace sparsepat
