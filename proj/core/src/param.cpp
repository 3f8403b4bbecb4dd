#include "micromoe/param.hpp"

#include <cstring>
#include <stdexcept>

namespace micromoe {

bool name_matches(const std::string& pattern, const std::string& name) {
  // Iterative glob: '*' matches any (possibly empty) run.
  std::size_t p = 0, s = 0, star = std::string::npos, mark = 0;
  while (s < name.size()) {
    if (p < pattern.size() &&
        (pattern[p] == name[s] || pattern[p] == '?')) {
      ++p;
      ++s;
    } else if (p < pattern.size() && pattern[p] == '*') {
      star = p++;
      mark = s;
    } else if (star != std::string::npos) {
      p = star + 1;
      s = ++mark;
    } else {
      return false;
    }
  }
  while (p < pattern.size() && pattern[p] == '*') ++p;
  return p == pattern.size();
}

std::shared_ptr<Tensor> ParamSet::add(const std::string& name, Tensor t) {
  if (params_.count(name))
    throw std::invalid_argument("ParamSet: duplicate name " + name);
  auto ptr = std::make_shared<Tensor>(std::move(t));
  ptr->requires_grad = true;
  params_[name] = ptr;
  return ptr;
}

std::shared_ptr<Tensor> ParamSet::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end())
    throw std::out_of_range("ParamSet: unknown name " + name);
  return it->second;
}

bool ParamSet::contains(const std::string& name) const {
  return params_.count(name) > 0;
}

void ParamSet::set_phase_masks(const std::vector<std::string>& trainable,
                               const std::vector<std::string>& frozen) {
  for (auto& [name, tensor] : params_) {
    bool t = false, f = false;
    for (const auto& pat : trainable) t = t || name_matches(pat, name);
    for (const auto& pat : frozen) f = f || name_matches(pat, name);
    if (t && f)
      throw std::invalid_argument("parameter matched by both trainable and "
                                  "frozen patterns: " +
                                  name);
    // Unmatched parameters default to frozen, so the two sets are always
    // disjoint and cover everything.
    tensor->requires_grad = t;
  }
}

void ParamSet::freeze_all() {
  for (auto& [name, tensor] : params_) tensor->requires_grad = false;
}

bool ParamSet::is_frozen(const std::string& name) const {
  return !get(name)->requires_grad;
}

std::vector<std::string> ParamSet::names() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& [name, tensor] : params_) out.push_back(name);
  return out;
}

std::vector<std::string> ParamSet::trainable_names() const {
  std::vector<std::string> out;
  for (const auto& [name, tensor] : params_)
    if (tensor->requires_grad) out.push_back(name);
  return out;
}

std::size_t ParamSet::total_values() const {
  std::size_t n = 0;
  for (const auto& [name, tensor] : params_) n += tensor->size();
  return n;
}

void ParamSet::zero_grads() {
  for (auto& [name, tensor] : params_) tensor->zero_grad();
}

std::vector<std::uint8_t> ParamSet::snapshot_bytes(
    const std::string& pattern) const {
  std::vector<std::uint8_t> out;
  for (const auto& [name, tensor] : params_) {
    if (!name_matches(pattern, name)) continue;
    std::size_t off = out.size();
    out.resize(off + tensor->size() * sizeof(double));
    std::memcpy(out.data() + off, tensor->data(),
                tensor->size() * sizeof(double));
  }
  return out;
}

}  // namespace micromoe
