#include "micromoe/evaluate.hpp"

#include <cstdio>
#include <fstream>

namespace micromoe {

Sequence sequence_from_record(const Record& rec, const Vocabulary& vocab,
                              std::size_t n_image_tokens, SequenceStyle style) {
  Sequence seq;
  seq.image = rec.image;
  seq.modality = rec.modality;
  seq.text.push_back(Vocabulary::kBos);
  switch (style) {
    case SequenceStyle::kAlign: {
      for (int id : vocab.tokenize(rec.caption)) seq.text.push_back(id);
      seq.text.push_back(Vocabulary::kEos);
      seq.prefix_len = static_cast<int>(n_image_tokens) + 1;
      break;
    }
    case SequenceStyle::kInstruct: {
      auto instr = vocab.tokenize(rec.instruction);
      for (int id : instr) seq.text.push_back(id);
      seq.prefix_len =
          static_cast<int>(n_image_tokens + 1 + instr.size());
      for (int id : vocab.tokenize(rec.response)) seq.text.push_back(id);
      seq.text.push_back(Vocabulary::kEos);
      break;
    }
    case SequenceStyle::kPrompt: {
      auto instr = vocab.tokenize(rec.instruction);
      for (int id : instr) seq.text.push_back(id);
      seq.prefix_len =
          static_cast<int>(n_image_tokens + 1 + instr.size());
      break;
    }
  }
  return seq;
}

SequenceBatch sequences_from_records(const std::vector<Record>& records,
                                     const Vocabulary& vocab,
                                     std::size_t n_image_tokens,
                                     SequenceStyle style) {
  SequenceBatch out;
  out.reserve(records.size());
  for (const Record& r : records)
    out.push_back(sequence_from_record(r, vocab, n_image_tokens, style));
  return out;
}

nlohmann::json MetricReport::to_json() const {
  return {{"aggregates", aggregates}, {"counts", counts}, {"skipped", skipped}};
}

void MetricReport::write_json(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write report: " + path.string());
  out << to_json().dump(2) << "\n";
}

void MetricReport::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write report: " + path.string());
  out << "id,task,modality,prediction,reference,metric,value\n";
  char buf[32];
  for (const SampleRow& r : rows) {
    std::snprintf(buf, sizeof(buf), "%.10g", r.value);
    out << r.id << ',' << r.task << ',' << r.modality << ',' << r.prediction
        << ',' << r.reference << ',' << r.metric << ',' << buf << '\n';
  }
}

MetricReport evaluate(const Model& model, const std::vector<Record>& records,
                      const Vocabulary& vocab, int max_new) {
  MetricReport report;
  std::map<std::string, double> sums;
  std::map<std::string, int> metric_counts;

  for (std::size_t i = 0; i < records.size(); ++i) {
    const Record& rec = records[i];
    Sequence prompt = sequence_from_record(
        rec, vocab, model.image_token_count(), SequenceStyle::kPrompt);
    std::string prediction;
    try {
      prediction = vocab.detokenize(model.greedy_generate(prompt, max_new));
    } catch (const std::length_error&) {
      report.skipped += 1;
      continue;
    }

    std::string task = task_kind_name(rec.task);
    report.counts[task] += 1;
    auto push = [&](const std::string& metric, double value) {
      report.rows.push_back({i, task, rec.modality, prediction, rec.response,
                             metric, value});
      sums[task + "." + metric] += value;
      metric_counts[task + "." + metric] += 1;
    };
    switch (rec.task) {
      case TaskKind::kOpen:
        push("recall", recall(prediction, rec.response));
        push("ems", exact_match(prediction, rec.response));
        push("bleu", bleu(prediction, rec.response));
        break;
      case TaskKind::kClosed:
        push("accuracy", closed_accuracy({prediction}, {rec.response}));
        break;
      case TaskKind::kClassification:
        push("accuracy",
             classification_accuracy({prediction}, {rec.response}));
        break;
    }
  }
  for (const auto& [key, sum] : sums)
    report.aggregates[key] = sum / metric_counts[key];
  return report;
}

}  // namespace micromoe
