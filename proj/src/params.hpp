#pragma once

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "matrix.hpp"

namespace fedgen {

// Which side of the privacy split a tensor lives on. Federated tensors
// are uploaded and aggregated; private tensors never leave the client.
enum class ParamTag { kFederated, kPrivate };

struct ParamTensor {
  std::string name;
  Matrix value;
  Matrix grad;  // same shape as value, starts at zero
  ParamTag tag = ParamTag::kFederated;
};

// Named map of parameter tensors. Iteration is sorted by name, which
// fixes the serialization byte order and every reduction order.
class ParamSet {
 public:
  ParamTensor& add(const std::string& name, Matrix value, ParamTag tag);

  bool contains(const std::string& name) const;
  ParamTensor& at(const std::string& name);
  const ParamTensor& at(const std::string& name) const;

  std::map<std::string, ParamTensor>& tensors() { return tensors_; }
  const std::map<std::string, ParamTensor>& tensors() const {
    return tensors_;
  }

  std::size_t size() const { return tensors_.size(); }
  std::vector<std::string> names() const;
  std::vector<std::string> names_with_tag(ParamTag tag) const;

  void zero_grads();
  void scale_grads(double s);
  double grad_l2_norm() const;

  // Scales every grad by threshold/norm when the global L2 norm exceeds
  // the threshold; returns the applied scale (1.0 when no clip).
  double clip_gradients(double threshold);

  // value -= lr * grad for every tensor, then grads are reset to zero.
  void sgd_step(double lr);

  // Deep copy of the tensors carrying `tag` (grads reset to zero).
  ParamSet subset(ParamTag tag) const;

  void write(std::ostream& out) const;
  static ParamSet read(std::istream& in);

 private:
  std::map<std::string, ParamTensor> tensors_;
};

// True when both sets hold the same names with the same tags and shapes.
bool partition_compatible(const ParamSet& a, const ParamSet& b);

// True when values (not grads) are bit-identical.
bool values_equal(const ParamSet& a, const ParamSet& b);

namespace io {

void write_u8(std::ostream& out, std::uint8_t v);
void write_u32(std::ostream& out, std::uint32_t v);
void write_u64(std::ostream& out, std::uint64_t v);
void write_f64(std::ostream& out, double v);
void write_string(std::ostream& out, const std::string& s);

std::uint8_t read_u8(std::istream& in);
std::uint32_t read_u32(std::istream& in);
std::uint64_t read_u64(std::istream& in);
double read_f64(std::istream& in);
std::string read_string(std::istream& in);

void write_matrix(std::ostream& out, const Matrix& m);
Matrix read_matrix(std::istream& in);

}  // namespace io

}  // namespace fedgen
