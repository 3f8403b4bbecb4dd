#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "micromoe/vision.hpp"
#include "micromoe/vocab.hpp"

namespace micromoe {

enum class TaskKind { kOpen, kClosed, kClassification };

std::string task_kind_name(TaskKind k);
TaskKind task_kind_from_name(const std::string& name);

/// The four modality names, in canonical order.
const std::vector<std::string>& modality_names();

/// One synthetic multimodal sample. The response is derivable from the
/// image's construction parameters; closed responses are yes/no and
/// classification responses come from a fixed organ list.
struct Record {
  SyntheticImage image;
  std::string caption;
  std::string instruction;
  std::string response;
  TaskKind task = TaskKind::kOpen;
  std::string modality;
  std::string split;
};

/// Construction parameters of one image: lesion count, shape, first-lesion
/// center, texture phase and a uniqueness salt. The (modality, attributes)
/// tuple identifies an image family; tuples are dealt to splits without
/// replacement, so tune and test never share one.
struct ImageAttributes {
  int count = 0;      // 0, 1 or 2 lesions
  int shape = 0;      // 0 round, 1 square (count >= 1)
  int cx = -1, cy = -1;  // first lesion center (count >= 1)
  int phase = 0;      // texture phase index, 0..3
  int variant = 0;    // salt for count-0 families

  auto operator<=>(const ImageAttributes&) const = default;
};

struct DatasetManifest {
  std::uint64_t seed = 0;
  int format_version = 1;
  // counts[split][modality][task] = n
  std::map<std::string, std::map<std::string, std::map<std::string, int>>>
      counts;
  std::string vocabulary_hash;
  double separability_accuracy = 0.0;

  nlohmann::json to_json() const;
  static DatasetManifest from_json(const nlohmann::json& j);
};

struct GeneratedCorpus {
  std::vector<Record> records;
  std::vector<ImageAttributes> attributes;  // parallel to records
  DatasetManifest manifest;
};

/// Raised by the record loader; names the offending line.
class CorpusError : public std::runtime_error {
 public:
  CorpusError(const std::string& msg, std::size_t line,
              std::size_t records_before)
      : std::runtime_error(msg),
        line_number(line),
        records_before_error(records_before) {}
  std::size_t line_number;
  std::size_t records_before_error;
};

/// The corpus vocabulary: template and answer words padded with unused
/// filler entries to 512 total ids (reserved block included).
Vocabulary corpus_vocabulary();

/// Recomputes the expected response from image attributes; the generation
/// oracle. Instruction must be one of the generator's templates.
std::string derive_response(const std::string& instruction,
                            const std::string& modality,
                            const ImageAttributes& attrs);

/// Deterministic corpus generation. Split sizes must be at least 4 (one
/// record per modality); modalities are balanced within +-1 per split.
/// Every record's response is verified against derive_response and the
/// modality-separability certificate must reach 99% or generation throws.
GeneratedCorpus generate_corpus(std::uint64_t seed,
                                const std::map<std::string, int>& split_sizes);

/// Linear-probe accuracy on mean patch embeddings of the given records,
/// using a probe encoder derived from the seed. The certificate behind all
/// router accuracy claims.
double separability_accuracy(const std::vector<Record>& records,
                             std::uint64_t seed);

void write_records(const std::vector<Record>& records,
                   const std::filesystem::path& path);
std::vector<Record> load_records(const std::filesystem::path& path);

/// Writes corpus.jsonl, manifest.json and vocab.txt into dir.
void write_corpus(const GeneratedCorpus& corpus,
                  const std::filesystem::path& dir);

std::vector<Record> filter_split(const std::vector<Record>& records,
                                 const std::string& split);

}  // namespace micromoe
