#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "micromoe/tensor.hpp"

namespace micromoe {

/// Glob-style match supporting '*' (any run of characters).
bool name_matches(const std::string& pattern, const std::string& name);

/// Named parameter tensors with per-name freezing.
///
/// Names are unique and iterated in lexicographic order everywhere, which
/// fixes the reduction/update order and keeps training bitwise reproducible.
/// A frozen parameter never receives gradients or optimizer updates; freezing
/// is a property of the name, toggled per training phase.
class ParamSet {
 public:
  std::shared_ptr<Tensor> add(const std::string& name, Tensor t);
  std::shared_ptr<Tensor> get(const std::string& name) const;
  bool contains(const std::string& name) const;

  /// Marks parameters matching a trainable pattern as trainable and
  /// everything else as frozen. A name matching both lists is a config
  /// error; a name matching neither defaults to frozen, keeping the two
  /// sets disjoint and exhaustive.
  void set_phase_masks(const std::vector<std::string>& trainable,
                       const std::vector<std::string>& frozen);

  void freeze_all();
  bool is_frozen(const std::string& name) const;

  const std::map<std::string, std::shared_ptr<Tensor>>& entries() const {
    return params_;
  }
  std::vector<std::string> names() const;
  std::vector<std::string> trainable_names() const;

  std::size_t total_values() const;
  void zero_grads();

  /// Raw little-endian bytes of every parameter matching the pattern,
  /// concatenated in name order. Used to assert freezing contracts.
  std::vector<std::uint8_t> snapshot_bytes(const std::string& pattern) const;

 private:
  std::map<std::string, std::shared_ptr<Tensor>> params_;
};

}  // namespace micromoe
