#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

namespace micromoe {

/// Closed word-level vocabulary.
///
/// Ids 0..4 are reserved (PAD, UNK, BOS, EOS, IMG); regular words follow in
/// file order. tokenize splits on single spaces, detokenize joins with
/// spaces, and the round trip is exact for in-vocabulary text.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kBos = 2;
  static constexpr int kEos = 3;
  static constexpr int kImg = 4;
  static constexpr int kReserved = 5;

  explicit Vocabulary(const std::vector<std::string>& words);

  static Vocabulary load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  int id_of(const std::string& word) const;  // kUnk when missing
  const std::string& word_of(int id) const;
  bool contains(const std::string& word) const;

  std::vector<int> tokenize(const std::string& text) const;
  std::string detokenize(const std::vector<int>& ids) const;

  int size() const { return static_cast<int>(id_to_word_.size()); }

  /// FNV-1a hash of the word list, hex-encoded; pins corpus/model agreement.
  std::string content_hash() const;

 private:
  std::vector<std::string> id_to_word_;
  std::unordered_map<std::string, int> word_to_id_;
};

}  // namespace micromoe
