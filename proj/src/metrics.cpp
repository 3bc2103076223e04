#include "vlmh/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <regex>
#include <unordered_map>

#include <fmt/format.h>

#include "vlmh/error.hpp"
#include "vlmh/util.hpp"

namespace vlmh {

namespace {

using NgramCounts = std::unordered_map<std::string, int>;

// Tokens hold only [a-z0-9] and bytes >= 0x80, so '\x1f' cannot collide.
NgramCounts count_ngrams(const TokenSequence& seq, std::size_t n) {
  NgramCounts counts;
  if (n == 0 || seq.size() < n) return counts;
  for (std::size_t i = 0; i + n <= seq.size(); ++i) {
    std::string key = seq.tokens[i];
    for (std::size_t k = 1; k < n; ++k) {
      key.push_back('\x1f');
      key += seq.tokens[i + k];
    }
    ++counts[key];
  }
  return counts;
}

std::size_t clipped_overlap(const NgramCounts& cand, const NgramCounts& ref) {
  std::size_t overlap = 0;
  for (const auto& [gram, c] : cand) {
    if (auto it = ref.find(gram); it != ref.end()) overlap += static_cast<std::size_t>(std::min(c, it->second));
  }
  return overlap;
}

std::size_t ngram_total(std::size_t len, std::size_t n) { return len >= n ? len - n + 1 : 0; }

double f1(double p, double r) { return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0; }

bool is_word_byte(unsigned char c) { return std::isalnum(c) || c >= 0x80; }

}  // namespace

std::string to_string(MetricId id) {
  switch (id) {
    case MetricId::rouge1: return "rouge1";
    case MetricId::rouge2: return "rouge2";
    case MetricId::rougeL: return "rougeL";
    case MetricId::bleu: return "bleu";
    case MetricId::cosine: return "cosine";
    case MetricId::judge: return "judge";
  }
  return "judge";
}

MetricId metric_id_from_string(const std::string& name) {
  for (auto id : kAllMetrics)
    if (to_string(id) == name) return id;
  fail(ErrorKind::ParseError, "unknown metric id: " + name);
}

std::string display_name(MetricId id) {
  switch (id) {
    case MetricId::rouge1: return "ROUGE-1";
    case MetricId::rouge2: return "ROUGE-2";
    case MetricId::rougeL: return "ROUGE-L";
    case MetricId::bleu: return "BLEU";
    case MetricId::cosine: return "Cosine Similarity";
    case MetricId::judge: return "Judge Score";
  }
  return "";
}

TokenSequence tokenize(std::string_view text) {
  TokenSequence seq;
  std::string current;
  for (unsigned char c : text) {
    if (is_word_byte(c)) {
      current.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : static_cast<char>(c));
    } else if (!current.empty()) {
      seq.tokens.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) seq.tokens.push_back(std::move(current));
  return seq;
}

double rouge_n(const TokenSequence& candidate, const TokenSequence& reference, int n) {
  if (n < 1) fail(ErrorKind::PreconditionViolation, fmt::format("rouge_n needs n >= 1, got {}", n));
  const auto un = static_cast<std::size_t>(n);
  const std::size_t cand_total = ngram_total(candidate.size(), un);
  const std::size_t ref_total = ngram_total(reference.size(), un);
  if (cand_total == 0 || ref_total == 0) return 0.0;
  const std::size_t overlap = clipped_overlap(count_ngrams(candidate, un), count_ngrams(reference, un));
  if (overlap == 0) return 0.0;
  return f1(static_cast<double>(overlap) / static_cast<double>(cand_total),
            static_cast<double>(overlap) / static_cast<double>(ref_total));
}

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b) {
  if (a.empty() || b.empty()) return 0;
  std::vector<std::size_t> prev(b.size() + 1, 0), row(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      row[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], row[j - 1]);
    std::swap(prev, row);
  }
  return prev[b.size()];
}

double rouge_l(const TokenSequence& candidate, const TokenSequence& reference) {
  const std::size_t l = lcs_length(candidate.tokens, reference.tokens);
  if (l == 0) return 0.0;
  return f1(static_cast<double>(l) / static_cast<double>(candidate.size()),
            static_cast<double>(l) / static_cast<double>(reference.size()));
}

double bleu(const TokenSequence& candidate, const TokenSequence& reference) {
  constexpr std::size_t kMaxOrder = 4;
  if (candidate.empty()) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= kMaxOrder; ++n) {
    const auto matches =
        static_cast<double>(clipped_overlap(count_ngrams(candidate, n), count_ngrams(reference, n)));
    const auto total = static_cast<double>(ngram_total(candidate.size(), n));
    double p;
    if (n == 1) {
      if (matches == 0.0) return 0.0;
      p = matches / total;
    } else {
      p = (matches + 1.0) / (total + 1.0);
    }
    log_sum += std::log(p);
  }
  const double ratio = static_cast<double>(reference.size()) / static_cast<double>(candidate.size());
  const double bp = std::min(1.0, std::exp(1.0 - ratio));
  return bp * std::exp(log_sum / static_cast<double>(kMaxOrder));
}

double pairwise_mean(std::span<const EmbeddingVector> vectors) {
  if (vectors.size() < 2)
    fail(ErrorKind::PreconditionViolation, fmt::format("pairwise_mean needs >= 2 vectors, got {}", vectors.size()));
  const Eigen::Index dim = vectors.front().dimension();
  std::vector<double> norms;
  norms.reserve(vectors.size());
  for (std::size_t i = 0; i < vectors.size(); ++i) {
    if (vectors[i].dimension() != dim)
      fail(ErrorKind::DimensionMismatch,
           fmt::format("vector {} has dimension {}, expected {}", i, vectors[i].dimension(), dim));
    const double norm = vectors[i].values.norm();
    if (!(norm > 0.0)) fail(ErrorKind::DegenerateVector, fmt::format("vector {} is all-zero", i));
    norms.push_back(norm);
  }
  double sum = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < vectors.size(); ++i) {
    for (std::size_t j = i + 1; j < vectors.size(); ++j) {
      const double cos = vectors[i].values.dot(vectors[j].values) / (norms[i] * norms[j]);
      sum += std::clamp(cos, 0.0, 1.0);
      ++pairs;
    }
  }
  return sum / static_cast<double>(pairs);
}

double lexical_consistency(std::span<const std::string> outputs, MetricId metric) {
  if (outputs.size() < 2)
    fail(ErrorKind::PreconditionViolation,
         fmt::format("lexical_consistency needs >= 2 outputs, got {}", outputs.size()));
  std::vector<TokenSequence> seqs;
  seqs.reserve(outputs.size());
  for (const auto& o : outputs) seqs.push_back(tokenize(o));
  auto score = [metric](const TokenSequence& c, const TokenSequence& r) {
    switch (metric) {
      case MetricId::rouge1: return rouge_n(c, r, 1);
      case MetricId::rouge2: return rouge_n(c, r, 2);
      case MetricId::rougeL: return rouge_l(c, r);
      case MetricId::bleu: return bleu(c, r);
      default:
        fail(ErrorKind::PreconditionViolation, "lexical_consistency does not support " + to_string(metric));
    }
  };
  double sum = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    for (std::size_t j = 0; j < seqs.size(); ++j) {
      if (i == j) continue;
      sum += score(seqs[i], seqs[j]);
      ++pairs;
    }
  }
  return sum / static_cast<double>(pairs);
}

JudgeVerdict parse_judge(std::string_view response_text) {
  std::string lower(response_text);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  const auto tag = lower.find("[score]");
  if (tag == std::string::npos)
    fail(ErrorKind::JudgeParseFailure, "judge response has no [Score]: line");

  std::size_t pos = tag + 7;
  auto skip = [&](std::string_view chars) {
    while (pos < response_text.size() && chars.find(response_text[pos]) != std::string_view::npos) ++pos;
  };
  skip(" \t*_:[");
  static const std::regex number(R"(^[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?)");
  const std::string rest(response_text.substr(pos));
  std::smatch m;
  if (!std::regex_search(rest, m, number))
    fail(ErrorKind::JudgeParseFailure, "judge [Score]: is not followed by a number",
         {{"found", trim(rest.substr(0, rest.find('\n')))}});
  const double score = std::stod(m.str());
  if (!(score >= 0.0 && score <= 1.0))
    fail(ErrorKind::JudgeOutOfRange, fmt::format("judge score {} outside [0,1]", score), {{"score", score}});

  JudgeVerdict verdict{score, {}};
  const std::size_t after_score = pos + static_cast<std::size_t>(m.length());
  const auto etag = lower.find("[explanation]", after_score);
  std::size_t start;
  if (etag != std::string::npos) {
    pos = etag + 13;
    skip(" \t*_:");
    start = pos;
  } else {
    start = after_score;
    while (start < response_text.size() && response_text[start] != '\n') ++start;
  }
  verdict.explanation = trim(response_text.substr(std::min(start, response_text.size())));
  return verdict;
}

MeanStd mean_std(std::span<const double> values) {
  if (values.empty()) fail(ErrorKind::EmptyInput, "mean_std of an empty list");
  const double n = static_cast<double>(values.size());
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= n;
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / n)};
}

nlohmann::json to_json(const ConsistencyScores& s) {
  nlohmann::json per = nlohmann::json::object();
  for (const auto& [id, ms] : s.per_metric) per[to_string(id)] = {{"mean", ms.mean}, {"std", ms.std}};
  return {{"distribution_id", s.distribution_id},
          {"per_metric", std::move(per)},
          {"average", s.average},
          {"average_std", s.average_std},
          {"part_count", s.part_count}};
}

ConsistencyScores consistency_scores_from_json(const nlohmann::json& j) {
  try {
    ConsistencyScores s;
    s.distribution_id = j.at("distribution_id").get<std::string>();
    for (const auto& [name, ms] : j.at("per_metric").items())
      s.per_metric[metric_id_from_string(name)] = {ms.at("mean").get<double>(), ms.at("std").get<double>()};
    s.average = j.at("average").get<double>();
    s.average_std = j.value("average_std", 0.0);
    s.part_count = j.value("part_count", std::size_t{0});
    return s;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::ParseError, std::string("malformed consistency scores: ") + e.what());
  }
}

ConsistencyScores aggregate(std::span<const MetricMap> per_part_scores, const std::string& distribution_id) {
  if (per_part_scores.empty()) fail(ErrorKind::EmptyInput, "aggregate needs at least one part");
  for (std::size_t i = 0; i < per_part_scores.size(); ++i) {
    const auto& m = per_part_scores[i];
    const bool complete = m.size() == kAllMetrics.size() &&
                          std::all_of(kAllMetrics.begin(), kAllMetrics.end(), [&](MetricId id) { return m.count(id); });
    if (!complete)
      fail(ErrorKind::InconsistentMetricSets,
           fmt::format("part {} of distribution {} does not carry all six metrics", i, distribution_id),
           {{"index", i}, {"distribution_id", distribution_id}});
  }

  ConsistencyScores out;
  out.distribution_id = distribution_id;
  out.part_count = per_part_scores.size();
  std::vector<double> column(per_part_scores.size());
  for (MetricId id : kAllMetrics) {
    for (std::size_t i = 0; i < per_part_scores.size(); ++i) column[i] = per_part_scores[i].at(id);
    out.per_metric[id] = mean_std(column);
  }
  double sum = 0.0;
  for (MetricId id : kAllMetrics) sum += out.per_metric[id].mean;
  out.average = sum / static_cast<double>(kAllMetrics.size());

  for (std::size_t i = 0; i < per_part_scores.size(); ++i) {
    double part_sum = 0.0;
    for (MetricId id : kAllMetrics) part_sum += per_part_scores[i].at(id);
    column[i] = part_sum / static_cast<double>(kAllMetrics.size());
  }
  out.average_std = mean_std(column).std;
  return out;
}

}  // namespace vlmh
