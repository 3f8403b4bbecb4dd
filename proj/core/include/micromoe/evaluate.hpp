#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "micromoe/metrics.hpp"
#include "micromoe/model.hpp"
#include "micromoe/synthdata.hpp"

namespace micromoe {

/// Sequence construction shared by training, tracing and evaluation.
///
/// align style:    [BOS] caption [EOS], prefix ends after BOS.
/// instruct style: [BOS] instruction response [EOS], prefix ends after the
///                 instruction.
/// prompt style:   [BOS] instruction, same prefix (for generation).
enum class SequenceStyle { kAlign, kInstruct, kPrompt };

Sequence sequence_from_record(const Record& rec, const Vocabulary& vocab,
                              std::size_t n_image_tokens, SequenceStyle style);

SequenceBatch sequences_from_records(const std::vector<Record>& records,
                                     const Vocabulary& vocab,
                                     std::size_t n_image_tokens,
                                     SequenceStyle style);

struct SampleRow {
  std::size_t id = 0;
  std::string task;
  std::string modality;
  std::string prediction;
  std::string reference;
  std::string metric;
  double value = 0.0;
};

/// Per-task aggregates with the per-sample rows they are the means of.
struct MetricReport {
  std::map<std::string, double> aggregates;  // e.g. "open.recall"
  std::map<std::string, int> counts;         // records per task kind
  int skipped = 0;                           // context overflows
  std::vector<SampleRow> rows;

  nlohmann::json to_json() const;
  void write_csv(const std::filesystem::path& path) const;
  void write_json(const std::filesystem::path& path) const;
};

/// Greedy-generates an answer for every record and scores it by task kind:
/// open answers get recall / exact match / BLEU, closed and classification
/// answers get accuracy. Records that cannot fit in the context are skipped
/// and counted.
MetricReport evaluate(const Model& model, const std::vector<Record>& records,
                      const Vocabulary& vocab, int max_new = 8);

}  // namespace micromoe
