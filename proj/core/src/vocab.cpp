#include "micromoe/vocab.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include "micromoe/rng.hpp"

namespace micromoe {

Vocabulary::Vocabulary(const std::vector<std::string>& words) {
  id_to_word_ = {"<pad>", "<unk>", "<bos>", "<eos>", "<img>"};
  for (const auto& w : words) {
    if (w.empty() || w.find(' ') != std::string::npos)
      throw std::invalid_argument("vocabulary word must be non-empty and "
                                  "space-free: '" + w + "'");
    id_to_word_.push_back(w);
  }
  for (std::size_t i = 0; i < id_to_word_.size(); ++i) {
    if (!word_to_id_.emplace(id_to_word_[i], static_cast<int>(i)).second)
      throw std::invalid_argument("duplicate vocabulary word: " +
                                  id_to_word_[i]);
  }
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open vocabulary: " + path.string());
  std::vector<std::string> words;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) words.push_back(line);
  return Vocabulary(words);
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write vocabulary: " + path.string());
  for (int i = kReserved; i < size(); ++i)
    out << id_to_word_[static_cast<std::size_t>(i)] << "\n";
}

int Vocabulary::id_of(const std::string& word) const {
  auto it = word_to_id_.find(word);
  return it == word_to_id_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::word_of(int id) const {
  if (id < 0 || id >= size())
    throw std::out_of_range("vocabulary id out of range");
  return id_to_word_[static_cast<std::size_t>(id)];
}

bool Vocabulary::contains(const std::string& word) const {
  return word_to_id_.count(word) > 0;
}

std::vector<int> Vocabulary::tokenize(const std::string& text) const {
  std::vector<int> out;
  std::istringstream ss(text);
  std::string word;
  while (ss >> word) out.push_back(id_of(word));
  return out;
}

std::string Vocabulary::detokenize(const std::vector<int>& ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += word_of(ids[i]);
  }
  return out;
}

std::string Vocabulary::content_hash() const {
  std::string joined;
  for (int i = kReserved; i < size(); ++i) {
    joined += id_to_word_[static_cast<std::size_t>(i)];
    joined += '\n';
  }
  std::uint64_t h = fnv1a64(joined);
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(h));
  return std::string(buf);
}

}  // namespace micromoe
