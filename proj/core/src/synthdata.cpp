#include "micromoe/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "micromoe/moe.hpp"
#include "micromoe/rng.hpp"

namespace micromoe {

namespace {

constexpr int kImageSize = 16;
constexpr int kPatchSize = 4;
constexpr int kLesionRadius = 2;
constexpr double kLesionIntensity = 0.95;
const std::vector<int> kCenters = {3, 6, 9, 12};

const std::vector<std::string> kModalities = {"CT", "MRI", "X-ray",
                                              "Pathology"};
const std::vector<std::string> kModalityWords = {"ct", "mri", "xray",
                                                 "pathology"};
const std::vector<std::string> kOrgans = {"heart", "lung", "liver", "kidney"};
const std::vector<std::string> kSplits = {"align", "instruct", "tune", "test"};

// Instruction templates. Answers must stay derivable from ImageAttributes.
const std::string kAskUpper = "is there a lesion in the upper half ?";
const std::string kAskLeft = "is there a lesion in the left half ?";
const std::string kAskRound = "is the lesion round ?";
const std::string kAskTwo = "are there two lesions ?";
const std::string kAskAny = "is there a lesion ?";
const std::string kAskShape = "what shape is the lesion ?";
const std::string kAskWhere = "where is the lesion ?";
const std::string kAskCount = "how many lesions are there ?";
const std::string kAskModality = "which imaging modality is this ?";
const std::string kAskOrgan = "which organ class is shown ?";
const std::string kAskDescribe = "describe the scan";

int modality_index(const std::string& name) {
  for (std::size_t i = 0; i < kModalities.size(); ++i)
    if (kModalities[i] == name) return static_cast<int>(i);
  throw std::invalid_argument("unknown modality: " + name);
}

std::pair<int, int> second_center(const ImageAttributes& a) {
  return {3 + ((a.cx - 3) + 6) % 12, 3 + ((a.cy - 3) + 3) % 12};
}

std::vector<std::pair<int, int>> lesion_centers(const ImageAttributes& a) {
  std::vector<std::pair<int, int>> out;
  if (a.count >= 1) out.emplace_back(a.cx, a.cy);
  if (a.count >= 2) out.push_back(second_center(a));
  return out;
}

std::string yes_no(bool b) { return b ? "yes" : "no"; }

std::string position_phrase(int cx, int cy) {
  std::string out = cy <= 7 ? "upper" : "lower";
  out += cx <= 7 ? " left" : " right";
  return out;
}

std::string organ_of(const ImageAttributes& a) {
  int quadrant = (a.cy <= 7 ? 0 : 2) + (a.cx <= 7 ? 0 : 1);
  return kOrgans[static_cast<std::size_t>(quadrant)];
}

std::string shape_word(const ImageAttributes& a) {
  return a.shape == 0 ? "round" : "square";
}

std::string make_caption(const std::string& modality,
                         const ImageAttributes& a) {
  const std::string& mod = kModalityWords[
      static_cast<std::size_t>(modality_index(modality))];
  if (a.count == 0) return "a " + mod + " scan with no lesion";
  if (a.count == 1)
    return "a " + mod + " scan with one " + shape_word(a) + " lesion in the " +
           position_phrase(a.cx, a.cy) + " region";
  return "a " + mod + " scan with two " + shape_word(a) + " lesions";
}

std::uint64_t attrs_key(const ImageAttributes& a) {
  std::uint64_t key = static_cast<std::uint64_t>(a.count);
  key = key * 8 + static_cast<std::uint64_t>(a.shape);
  key = key * 32 + static_cast<std::uint64_t>(a.cx + 1);
  key = key * 32 + static_cast<std::uint64_t>(a.cy + 1);
  key = key * 8 + static_cast<std::uint64_t>(a.phase);
  key = key * 64 + static_cast<std::uint64_t>(a.variant);
  return key;
}

SyntheticImage render_image(std::uint64_t seed, int mod_idx,
                            const ImageAttributes& a) {
  RngStream noise = derive_stream(seed, "image-noise",
                                  static_cast<std::uint64_t>(mod_idx),
                                  attrs_key(a));
  double phi = static_cast<double>(a.phase) * std::numbers::pi / 2.0;
  // Frequency of 4 cycles per 16 px repeats exactly once per 4-px patch, so
  // every patch carries the same orientation signature and the mean patch
  // embedding stays linearly separable across modalities.
  SyntheticImage img;
  img.pixels = Tensor(kImageSize, kImageSize);
  for (int y = 0; y < kImageSize; ++y) {
    for (int x = 0; x < kImageSize; ++x) {
      double fx = static_cast<double>(x) / kImageSize;
      double fy = static_cast<double>(y) / kImageSize;
      double base = 0.0;
      switch (mod_idx) {
        case 0:  // CT: horizontal grating
          base = std::sin(2.0 * std::numbers::pi * 4.0 * fy + phi);
          break;
        case 1:  // MRI: vertical grating
          base = std::sin(2.0 * std::numbers::pi * 4.0 * fx + phi);
          break;
        case 2:  // X-ray: diagonal grating
          base = std::sin(2.0 * std::numbers::pi * 4.0 * (fx + fy) + phi);
          break;
        default:  // Pathology: two-dimensional dot grid
          base = std::sin(2.0 * std::numbers::pi * 4.0 * fx + phi) *
                 std::sin(2.0 * std::numbers::pi * 4.0 * fy + phi);
          break;
      }
      double v = 0.5 + 0.35 * base + (noise.next_uniform() - 0.5) * 0.08;
      img.pixels.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) =
          std::clamp(v, 0.0, 1.0);
    }
  }
  for (auto [cx, cy] : lesion_centers(a)) {
    for (int y = cy - kLesionRadius; y <= cy + kLesionRadius; ++y) {
      for (int x = cx - kLesionRadius; x <= cx + kLesionRadius; ++x) {
        if (y < 0 || y >= kImageSize || x < 0 || x >= kImageSize) continue;
        int dx = x - cx, dy = y - cy;
        bool inside = a.shape == 0
                          ? dx * dx + dy * dy <= kLesionRadius * kLesionRadius
                          : true;  // square fills the whole window
        if (inside)
          img.pixels.at(static_cast<std::size_t>(y),
                        static_cast<std::size_t>(x)) = kLesionIntensity;
      }
    }
  }
  // Quantize to 1/1024 steps so serialized values round-trip exactly.
  for (double& v : img.pixels.values()) v = std::round(v * 1024.0) / 1024.0;
  return img;
}

}  // namespace

std::string task_kind_name(TaskKind k) {
  switch (k) {
    case TaskKind::kOpen: return "open";
    case TaskKind::kClosed: return "closed";
    case TaskKind::kClassification: return "classification";
  }
  throw std::logic_error("bad task kind");
}

TaskKind task_kind_from_name(const std::string& name) {
  if (name == "open") return TaskKind::kOpen;
  if (name == "closed") return TaskKind::kClosed;
  if (name == "classification") return TaskKind::kClassification;
  throw std::invalid_argument("unknown task kind: " + name);
}

const std::vector<std::string>& modality_names() { return kModalities; }

Vocabulary corpus_vocabulary() {
  std::vector<std::string> words = {
      "a",        "is",      "there",    "lesion",  "in",      "the",
      "upper",    "half",    "?",        "left",    "round",   "are",
      "two",      "lesions", "what",     "shape",   "where",   "how",
      "many",     "which",   "imaging",  "modality", "this",   "organ",
      "class",    "shown",   "describe", "scan",    "with",    "no",
      "one",      "region",  "lower",    "right",   "yes",     "square",
      "none",     "ct",      "mri",      "xray",    "pathology", "heart",
      "lung",     "liver",   "kidney"};
  // Pad the vocabulary to 512 ids with unused filler words.
  int target = 512 - Vocabulary::kReserved;
  for (int i = static_cast<int>(words.size()); i < target; ++i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "filler%03d", i);
    words.push_back(buf);
  }
  return Vocabulary(words);
}

std::string derive_response(const std::string& instruction,
                            const std::string& modality,
                            const ImageAttributes& a) {
  auto centers = lesion_centers(a);
  if (instruction == kAskUpper) {
    bool any = false;
    for (auto [cx, cy] : centers) any = any || cy <= 7;
    return yes_no(any);
  }
  if (instruction == kAskLeft) {
    bool any = false;
    for (auto [cx, cy] : centers) any = any || cx <= 7;
    return yes_no(any);
  }
  if (instruction == kAskRound) {
    if (a.count < 1) throw std::invalid_argument("shape question without lesion");
    return yes_no(a.shape == 0);
  }
  if (instruction == kAskTwo) return yes_no(a.count == 2);
  if (instruction == kAskAny) return yes_no(a.count >= 1);
  if (instruction == kAskShape) {
    if (a.count < 1) throw std::invalid_argument("shape question without lesion");
    return shape_word(a);
  }
  if (instruction == kAskWhere) {
    if (a.count != 1)
      throw std::invalid_argument("position question needs exactly one lesion");
    return position_phrase(a.cx, a.cy);
  }
  if (instruction == kAskCount)
    return a.count == 0 ? "none" : (a.count == 1 ? "one" : "two");
  if (instruction == kAskModality)
    return kModalityWords[static_cast<std::size_t>(modality_index(modality))];
  if (instruction == kAskOrgan) {
    if (a.count < 1) throw std::invalid_argument("organ question without lesion");
    return organ_of(a);
  }
  if (instruction == kAskDescribe) return make_caption(modality, a);
  throw std::invalid_argument("unknown instruction template: " + instruction);
}

GeneratedCorpus generate_corpus(std::uint64_t seed,
                                const std::map<std::string, int>& split_sizes) {
  for (const auto& [split, size] : split_sizes) {
    if (std::find(kSplits.begin(), kSplits.end(), split) == kSplits.end())
      throw std::invalid_argument("unknown split: " + split);
    if (size < 4)
      throw std::invalid_argument(
          "split '" + split +
          "' needs at least one record per modality (size >= 4)");
  }

  // Universe of attribute families per modality, dealt without replacement.
  std::vector<std::vector<ImageAttributes>> decks(kModalities.size());
  for (std::size_t m = 0; m < kModalities.size(); ++m) {
    auto& deck = decks[m];
    // Phases 0 and pi/2 only: a pi shift negates the texture, which no
    // linear probe could separate.
    for (int phase = 0; phase < 2; ++phase)
      for (int variant = 0; variant < 8; ++variant)
        deck.push_back({0, 0, -1, -1, phase, variant});
    for (int phase = 0; phase < 2; ++phase)
      for (int shape = 0; shape < 2; ++shape)
        for (int count = 1; count <= 2; ++count)
          for (int cy : kCenters)
            for (int cx : kCenters)
              deck.push_back({count, shape, cx, cy, phase, 0});
    RngStream rng = derive_stream(seed, "deck", m);
    for (std::size_t i = deck.size(); i > 1; --i)
      std::swap(deck[i - 1], deck[static_cast<std::size_t>(
                                 rng.next_below(i))]);
  }
  std::vector<std::vector<bool>> used(kModalities.size());
  for (std::size_t m = 0; m < kModalities.size(); ++m)
    used[m].assign(decks[m].size(), false);

  auto draw = [&](int m, bool needs_lesion, bool needs_single) {
    auto& deck = decks[static_cast<std::size_t>(m)];
    auto& flags = used[static_cast<std::size_t>(m)];
    for (std::size_t i = 0; i < deck.size(); ++i) {
      if (flags[i]) continue;
      if (needs_lesion && deck[i].count < 1) continue;
      if (needs_single && deck[i].count != 1) continue;
      flags[i] = true;
      return deck[i];
    }
    throw std::invalid_argument("attribute universe exhausted; shrink splits");
  };

  GeneratedCorpus out;
  out.manifest.seed = seed;
  std::uint64_t global_index = 0;

  for (const std::string& split : kSplits) {
    auto it = split_sizes.find(split);
    if (it == split_sizes.end()) continue;
    int size = it->second;
    for (int i = 0; i < size; ++i, ++global_index) {
      int m = i % 4;
      const std::string& modality = kModalities[static_cast<std::size_t>(m)];
      RngStream pick = derive_stream(seed, "template", global_index);

      TaskKind task;
      std::string instruction;
      ImageAttributes attrs;
      if (split == "align") {
        task = TaskKind::kOpen;
        instruction = kAskDescribe;
        attrs = draw(m, false, false);
      } else {
        task = std::vector<TaskKind>{TaskKind::kClosed, TaskKind::kOpen,
                                     TaskKind::kClassification}[
            static_cast<std::size_t>(i % 3)];
        switch (task) {
          case TaskKind::kClosed: {
            attrs = draw(m, false, false);
            std::vector<std::string> pool = {kAskUpper, kAskLeft, kAskTwo,
                                             kAskAny};
            if (attrs.count >= 1) pool.push_back(kAskRound);
            instruction = pool[pick.next_below(pool.size())];
            break;
          }
          case TaskKind::kOpen: {
            attrs = draw(m, false, false);
            std::vector<std::string> pool = {kAskCount, kAskModality};
            if (attrs.count >= 1) pool.push_back(kAskShape);
            if (attrs.count == 1) pool.push_back(kAskWhere);
            instruction = pool[pick.next_below(pool.size())];
            break;
          }
          case TaskKind::kClassification: {
            attrs = draw(m, true, false);
            instruction = kAskOrgan;
            break;
          }
        }
      }

      Record rec;
      rec.image = render_image(seed, m, attrs);
      rec.caption = make_caption(modality, attrs);
      rec.instruction = instruction;
      rec.response = derive_response(instruction, modality, attrs);
      rec.task = task;
      rec.modality = modality;
      rec.split = split;

      // Verification pass: the stored response must re-derive exactly.
      if (rec.response != derive_response(instruction, modality, attrs))
        throw std::logic_error("answer oracle mismatch during generation");

      out.manifest.counts[split][modality][task_kind_name(task)] += 1;
      out.records.push_back(std::move(rec));
      out.attributes.push_back(attrs);
    }
  }

  out.manifest.vocabulary_hash = corpus_vocabulary().content_hash();
  out.manifest.separability_accuracy = separability_accuracy(out.records, seed);
  if (out.manifest.separability_accuracy < 0.99)
    throw std::runtime_error(
        "modality separability certificate failed: linear probe accuracy " +
        std::to_string(out.manifest.separability_accuracy));
  return out;
}

double separability_accuracy(const std::vector<Record>& records,
                             std::uint64_t seed) {
  if (records.empty()) throw std::invalid_argument("no records");
  const std::size_t kProbeDim = 16;
  VisionEncoder probe;
  probe.patch_size = kPatchSize;
  {
    Tensor w(kPatchSize * kPatchSize, kProbeDim);
    RngStream rng = derive_stream(seed, "probe-encoder");
    for (double& x : w.values()) x = 0.25 * rng.next_normal();
    probe.weight = std::make_shared<Tensor>(std::move(w));
    probe.bias = std::make_shared<Tensor>(Tensor(1, kProbeDim));
  }

  std::size_t n = records.size();
  Tensor features(n, kProbeDim + 1);  // +1 bias column
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    Tensor tokens = encode_image(records[i].image, probe);
    for (std::size_t r = 0; r < tokens.rows(); ++r)
      for (std::size_t c = 0; c < kProbeDim; ++c)
        features.at(i, c) += tokens.at(r, c) /
                             static_cast<double>(tokens.rows());
    features.at(i, kProbeDim) = 1.0;
    labels[i] = modality_index(records[i].modality);
  }
  // Standardize feature columns.
  for (std::size_t c = 0; c < kProbeDim; ++c) {
    double mean = 0.0, var = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += features.at(i, c);
    mean /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      double d = features.at(i, c) - mean;
      var += d * d;
    }
    double inv = 1.0 / std::sqrt(var / static_cast<double>(n) + 1e-9);
    for (std::size_t i = 0; i < n; ++i)
      features.at(i, c) = (features.at(i, c) - mean) * inv;
  }

  // Multinomial logistic regression, full-batch gradient descent.
  const std::size_t classes = kModalities.size();
  Tensor w(kProbeDim + 1, classes);
  for (int iter = 0; iter < 300; ++iter) {
    Tensor grad(kProbeDim + 1, classes);
    for (std::size_t i = 0; i < n; ++i) {
      double logits[8] = {0};
      for (std::size_t k = 0; k < classes; ++k)
        for (std::size_t c = 0; c <= kProbeDim; ++c)
          logits[k] += features.at(i, c) * w.at(c, k);
      double mx = *std::max_element(logits, logits + classes);
      double sum = 0.0;
      for (std::size_t k = 0; k < classes; ++k) {
        logits[k] = std::exp(logits[k] - mx);
        sum += logits[k];
      }
      for (std::size_t k = 0; k < classes; ++k) {
        double p = logits[k] / sum;
        double delta =
            (p - (static_cast<int>(k) == labels[i] ? 1.0 : 0.0)) /
            static_cast<double>(n);
        for (std::size_t c = 0; c <= kProbeDim; ++c)
          grad.at(c, k) += delta * features.at(i, c);
      }
    }
    for (std::size_t j = 0; j < w.size(); ++j)
      w.values()[j] -= 1.0 * grad.values()[j];
  }

  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double logits[8] = {0};
    for (std::size_t k = 0; k < classes; ++k)
      for (std::size_t c = 0; c <= kProbeDim; ++c)
        logits[k] += features.at(i, c) * w.at(c, k);
    if (argmax_low(logits, classes) == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

nlohmann::json DatasetManifest::to_json() const {
  return {{"seed", seed},
          {"format_version", format_version},
          {"counts", counts},
          {"vocabulary_hash", vocabulary_hash},
          {"separability_accuracy", separability_accuracy},
          {"files",
           {{"corpus", "corpus.jsonl"}, {"vocabulary", "vocab.txt"}}}};
}

DatasetManifest DatasetManifest::from_json(const nlohmann::json& j) {
  DatasetManifest m;
  m.seed = j.at("seed").get<std::uint64_t>();
  m.format_version = j.at("format_version").get<int>();
  m.counts = j.at("counts")
                 .get<std::map<std::string,
                               std::map<std::string, std::map<std::string, int>>>>();
  m.vocabulary_hash = j.at("vocabulary_hash").get<std::string>();
  m.separability_accuracy = j.at("separability_accuracy").get<double>();
  return m;
}

void write_records(const std::vector<Record>& records,
                   const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write records: " + path.string());
  for (const Record& rec : records) {
    nlohmann::ordered_json j;
    auto rows = nlohmann::ordered_json::array();
    for (std::size_t y = 0; y < rec.image.height(); ++y) {
      auto row = nlohmann::ordered_json::array();
      for (std::size_t x = 0; x < rec.image.width(); ++x)
        row.push_back(rec.image.pixels.at(y, x));
      rows.push_back(std::move(row));
    }
    j["image"] = std::move(rows);
    j["caption"] = rec.caption;
    j["instruction"] = rec.instruction;
    j["response"] = rec.response;
    j["task"] = task_kind_name(rec.task);
    j["modality"] = rec.modality;
    j["split"] = rec.split;
    out << j.dump() << "\n";
  }
}

std::vector<Record> load_records(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open records: " + path.string());
  std::vector<Record> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      nlohmann::json j = nlohmann::json::parse(line);
      Record rec;
      const auto& img = j.at("image");
      std::size_t h = img.size();
      if (h == 0) throw std::invalid_argument("empty image");
      std::size_t w = img[0].size();
      rec.image.pixels = Tensor(h, w);
      for (std::size_t y = 0; y < h; ++y) {
        if (img[y].size() != w) throw std::invalid_argument("ragged image");
        for (std::size_t x = 0; x < w; ++x)
          rec.image.pixels.at(y, x) = img[y][x].get<double>();
      }
      if (!rec.image.pixels.all_finite())
        throw std::invalid_argument("non-finite pixel");
      rec.caption = j.at("caption").get<std::string>();
      rec.instruction = j.at("instruction").get<std::string>();
      rec.response = j.at("response").get<std::string>();
      rec.task = task_kind_from_name(j.at("task").get<std::string>());
      rec.modality = j.at("modality").get<std::string>();
      modality_index(rec.modality);  // validates
      rec.split = j.at("split").get<std::string>();
      records.push_back(std::move(rec));
    } catch (const std::exception& e) {
      throw CorpusError("record file " + path.string() + " line " +
                            std::to_string(line_no) + ": " + e.what(),
                        line_no, records.size());
    }
  }
  return records;
}

void write_corpus(const GeneratedCorpus& corpus,
                  const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_records(corpus.records, dir / "corpus.jsonl");
  std::ofstream mf(dir / "manifest.json", std::ios::trunc);
  mf << corpus.manifest.to_json().dump(2) << "\n";
  corpus_vocabulary().save(dir / "vocab.txt");
}

std::vector<Record> filter_split(const std::vector<Record>& records,
                                 const std::string& split) {
  std::vector<Record> out;
  for (const Record& r : records)
    if (r.split == split) out.push_back(r);
  return out;
}

}  // namespace micromoe
