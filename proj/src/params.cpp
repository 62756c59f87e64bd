#include "params.hpp"

#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>

#include "common.hpp"

namespace fedgen {

namespace {
constexpr std::uint32_t kParamSetVersion = 1;
}

ParamTensor& ParamSet::add(const std::string& name, Matrix value,
                           ParamTag tag) {
  if (tensors_.count(name) != 0) {
    fail(ErrorCode::kInvalidArgument,
         "ParamSet::add: duplicate tensor name '" + name + "'");
  }
  ParamTensor t;
  t.name = name;
  t.grad = Matrix(value.rows, value.cols, 0.0);
  t.value = std::move(value);
  t.tag = tag;
  return tensors_.emplace(name, std::move(t)).first->second;
}

bool ParamSet::contains(const std::string& name) const {
  return tensors_.count(name) != 0;
}

ParamTensor& ParamSet::at(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) {
    fail(ErrorCode::kInvalidArgument,
         "ParamSet: no tensor named '" + name + "'");
  }
  return it->second;
}

const ParamTensor& ParamSet::at(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) {
    fail(ErrorCode::kInvalidArgument,
         "ParamSet: no tensor named '" + name + "'");
  }
  return it->second;
}

std::vector<std::string> ParamSet::names() const {
  std::vector<std::string> out;
  out.reserve(tensors_.size());
  for (const auto& [name, t] : tensors_) out.push_back(name);
  return out;
}

std::vector<std::string> ParamSet::names_with_tag(ParamTag tag) const {
  std::vector<std::string> out;
  for (const auto& [name, t] : tensors_) {
    if (t.tag == tag) out.push_back(name);
  }
  return out;
}

void ParamSet::zero_grads() {
  for (auto& [name, t] : tensors_) {
    std::fill(t.grad.data.begin(), t.grad.data.end(), 0.0);
  }
}

void ParamSet::scale_grads(double s) {
  for (auto& [name, t] : tensors_) scale_in_place(t.grad, s);
}

double ParamSet::grad_l2_norm() const {
  double acc = 0.0;
  for (const auto& [name, t] : tensors_) {
    for (double v : t.grad.data) acc += v * v;
  }
  return std::sqrt(acc);
}

double ParamSet::clip_gradients(double threshold) {
  if (threshold <= 0.0) {
    fail(ErrorCode::kInvalidArgument,
         "clip_gradients: threshold must be positive");
  }
  double norm = grad_l2_norm();
  if (norm <= threshold) return 1.0;
  double scale = threshold / norm;
  scale_grads(scale);
  return scale;
}

void ParamSet::sgd_step(double lr) {
  for (auto& [name, t] : tensors_) {
    for (std::size_t i = 0; i < t.value.size(); ++i) {
      t.value.data[i] -= lr * t.grad.data[i];
    }
    std::fill(t.grad.data.begin(), t.grad.data.end(), 0.0);
  }
}

ParamSet ParamSet::subset(ParamTag tag) const {
  ParamSet out;
  for (const auto& [name, t] : tensors_) {
    if (t.tag == tag) out.add(name, t.value, t.tag);
  }
  return out;
}

bool partition_compatible(const ParamSet& a, const ParamSet& b) {
  if (a.size() != b.size()) return false;
  auto ia = a.tensors().begin();
  auto ib = b.tensors().begin();
  for (; ia != a.tensors().end(); ++ia, ++ib) {
    if (ia->first != ib->first) return false;
    if (ia->second.tag != ib->second.tag) return false;
    if (!ia->second.value.same_shape(ib->second.value)) return false;
  }
  return true;
}

bool values_equal(const ParamSet& a, const ParamSet& b) {
  if (!partition_compatible(a, b)) return false;
  auto ia = a.tensors().begin();
  auto ib = b.tensors().begin();
  for (; ia != a.tensors().end(); ++ia, ++ib) {
    if (std::memcmp(ia->second.value.data.data(),
                    ib->second.value.data.data(),
                    ia->second.value.size() * sizeof(double)) != 0) {
      return false;
    }
  }
  return true;
}

namespace io {

void write_u8(std::ostream& out, std::uint8_t v) {
  out.put(static_cast<char>(v));
}

void write_u32(std::ostream& out, std::uint32_t v) {
  char buf[4];
  for (int i = 0; i < 4; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(buf, 4);
}

void write_u64(std::ostream& out, std::uint64_t v) {
  char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(buf, 8);
}

void write_f64(std::ostream& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  write_u64(out, bits);
}

void write_string(std::ostream& out, const std::string& s) {
  write_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

namespace {
void require_good(std::istream& in, const char* what) {
  if (!in.good()) {
    fail(ErrorCode::kFormat, std::string("truncated stream while reading ") + what);
  }
}
}  // namespace

std::uint8_t read_u8(std::istream& in) {
  int c = in.get();
  require_good(in, "u8");
  return static_cast<std::uint8_t>(c);
}

std::uint32_t read_u32(std::istream& in) {
  char buf[4];
  in.read(buf, 4);
  require_good(in, "u32");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[i]))
         << (8 * i);
  }
  return v;
}

std::uint64_t read_u64(std::istream& in) {
  char buf[8];
  in.read(buf, 8);
  require_good(in, "u64");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[i]))
         << (8 * i);
  }
  return v;
}

double read_f64(std::istream& in) {
  std::uint64_t bits = read_u64(in);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

std::string read_string(std::istream& in) {
  std::uint32_t n = read_u32(in);
  std::string s(n, '\0');
  if (n > 0) {
    in.read(s.data(), static_cast<std::streamsize>(n));
    require_good(in, "string");
  }
  return s;
}

void write_matrix(std::ostream& out, const Matrix& m) {
  write_u64(out, m.rows);
  write_u64(out, m.cols);
  for (double v : m.data) write_f64(out, v);
}

Matrix read_matrix(std::istream& in) {
  std::uint64_t rows = read_u64(in);
  std::uint64_t cols = read_u64(in);
  Matrix m(rows, cols);
  for (double& v : m.data) v = read_f64(in);
  return m;
}

}  // namespace io

void ParamSet::write(std::ostream& out) const {
  io::write_u32(out, kParamSetVersion);
  io::write_u64(out, tensors_.size());
  for (const auto& [name, t] : tensors_) {
    io::write_string(out, name);
    io::write_u8(out, t.tag == ParamTag::kPrivate ? 1 : 0);
    io::write_matrix(out, t.value);
  }
}

ParamSet ParamSet::read(std::istream& in) {
  std::uint32_t version = io::read_u32(in);
  if (version != kParamSetVersion) {
    fail(ErrorCode::kFormat,
         "unsupported parameter-set format version " + std::to_string(version));
  }
  std::uint64_t count = io::read_u64(in);
  ParamSet out;
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = io::read_string(in);
    ParamTag tag = io::read_u8(in) == 1 ? ParamTag::kPrivate : ParamTag::kFederated;
    Matrix value = io::read_matrix(in);
    out.add(name, std::move(value), tag);
  }
  return out;
}

}  // namespace fedgen
