#include "stp/data.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "stp/rng.hpp"

namespace stp {

namespace {

// Pattern-task token inventory (content ids start at kFirstContentToken).
constexpr int kNumOps = 4;
constexpr int kNumArgs = 8;
constexpr int kNumMinorityArgs = 2;  // last-clause args from this pool => STAR STAR
constexpr int kDescOpBase = kFirstContentToken;              // 5..8
constexpr int kDescArgBase = kDescOpBase + kNumOps;          // 9..16
constexpr int kPatternOpBase = kDescArgBase + kNumArgs;      // 17..20
constexpr int kPatternArgBase = kPatternOpBase + kNumOps;    // 21..28
constexpr int kStarToken = kPatternArgBase + kNumArgs;       // 29
constexpr int kPatternVocabEnd = kStarToken + 1;

constexpr int kMinClauses = 2;
constexpr int kMaxClauses = 3;

std::vector<int> compile_answer(const std::vector<int>& query) {
  std::vector<int> answer;
  for (size_t i = 0; i + 1 < query.size(); i += 2) {
    answer.push_back(kPatternOpBase + (query[i] - kDescOpBase));
    answer.push_back(kPatternArgBase + (query[i + 1] - kDescArgBase));
    answer.push_back(kStarToken);
  }
  int last_arg = query[query.size() - 1] - kDescArgBase;
  if (last_arg >= kNumArgs - kNumMinorityArgs) answer.push_back(kStarToken);
  return answer;
}

SuffixClass suffix_of(const std::vector<int>& query) {
  int last_arg = query[query.size() - 1] - kDescArgBase;
  return last_arg >= kNumArgs - kNumMinorityArgs ? SuffixClass::kStarStar : SuffixClass::kStar;
}

std::vector<int> sample_pattern_query(Rng& rng, double suffix_ratio) {
  int k = kMinClauses + rng.below_int(kMaxClauses - kMinClauses + 1);
  std::vector<int> query;
  for (int c = 0; c < k; ++c) {
    query.push_back(kDescOpBase + rng.below_int(kNumOps));
    if (c + 1 < k) {
      query.push_back(kDescArgBase + rng.below_int(kNumArgs));
    } else {
      // The last argument decides the suffix class; minority pool drawn with
      // probability 1/(1+ratio).
      bool minority = rng.uniform01() < 1.0 / (1.0 + suffix_ratio);
      int arg = minority ? (kNumArgs - kNumMinorityArgs) + rng.below_int(kNumMinorityArgs)
                         : rng.below_int(kNumArgs - kNumMinorityArgs);
      query.push_back(kDescArgBase + arg);
    }
  }
  return query;
}

void check_example_fits(const ExamplePair& pair, int vocab_limit, int max_seq_len) {
  for (int id : pair.full_sequence())
    if (id < 0 || id >= vocab_limit)
      throw std::runtime_error("data: token id " + std::to_string(id) +
                               " exceeds vocabulary limit " + std::to_string(vocab_limit));
  if (pair.full_length() > max_seq_len)
    throw std::runtime_error("data: sequence length " + std::to_string(pair.full_length()) +
                             " exceeds max_seq_len " + std::to_string(max_seq_len));
}

}  // namespace

const char* suffix_class_name(SuffixClass c) {
  switch (c) {
    case SuffixClass::kStar: return "STAR";
    case SuffixClass::kStarStar: return "STARSTAR";
    case SuffixClass::kNone: return "NONE";
  }
  return "?";
}

SuffixClass suffix_class_from_name(const std::string& name) {
  if (name == "STAR") return SuffixClass::kStar;
  if (name == "STARSTAR") return SuffixClass::kStarStar;
  if (name == "NONE") return SuffixClass::kNone;
  throw std::invalid_argument("data: unknown suffix class '" + name + "'");
}

std::vector<int> ExamplePair::full_sequence() const {
  std::vector<int> seq;
  seq.reserve(full_length());
  seq.push_back(kBosToken);
  seq.insert(seq.end(), instruction.begin(), instruction.end());
  seq.insert(seq.end(), query.begin(), query.end());
  seq.push_back(kSepToken);
  seq.insert(seq.end(), answer.begin(), answer.end());
  seq.push_back(kEosToken);
  return seq;
}

SpanMarks ExamplePair::marks() const {
  SpanMarks m;
  m.query_start = 1 + static_cast<int>(instruction.size());
  m.query_end = m.query_start + static_cast<int>(query.size()) - 1;
  m.answer_end = m.query_end + 2 + static_cast<int>(answer.size());  // the EOS position
  return m;
}

int ExamplePair::full_length() const {
  return 3 + static_cast<int>(instruction.size() + query.size() + answer.size());
}

DatasetSplit generate_pattern_task(uint64_t seed, int n_train, int n_test,
                                   double suffix_ratio) {
  if (n_train < 64) throw std::invalid_argument("generate_pattern_task: n_train must be >= 64");
  if (n_test < 1) throw std::invalid_argument("generate_pattern_task: n_test must be >= 1");
  if (suffix_ratio < 1.0)
    throw std::invalid_argument("generate_pattern_task: suffix_ratio must be >= 1");

  Rng rng(mix_seed(seed, 0xDA7A5E7u));
  std::set<std::vector<int>> seen;
  DatasetSplit split;
  split.generation_seed = seed;
  split.task_tag = "pattern";

  auto draw = [&](std::vector<ExamplePair>& out, int count) {
    while (static_cast<int>(out.size()) < count) {
      std::vector<int> query = sample_pattern_query(rng, suffix_ratio);
      if (!seen.insert(query).second) continue;  // queries unique across train+test
      ExamplePair pair;
      pair.query = query;
      pair.answer = compile_answer(query);
      pair.suffix = suffix_of(query);
      check_example_fits(pair, kPatternVocabEnd, 96);
      out.push_back(std::move(pair));
    }
  };
  draw(split.train, n_train);
  draw(split.test, n_test);
  return split;
}

DatasetSplit generate_copy_task(uint64_t seed, int n, int payload_len,
                                bool disjoint_alphabets) {
  if (n < 2) throw std::invalid_argument("generate_copy_task: n must be >= 2");
  if (payload_len < 1) throw std::invalid_argument("generate_copy_task: payload_len must be >= 1");
  constexpr int kAlphabet = 16;
  Rng rng(mix_seed(seed, 0xC0B7u));
  std::set<std::vector<int>> seen;
  DatasetSplit split;
  split.generation_seed = seed;
  split.task_tag = "copy";

  auto draw = [&](std::vector<ExamplePair>& out, int count, int base) {
    int guard = 0;
    while (static_cast<int>(out.size()) < count) {
      if (++guard > count * 1000)
        throw std::runtime_error("generate_copy_task: payload space too small for n");
      std::vector<int> payload(payload_len);
      for (int& t : payload) t = base + rng.below_int(kAlphabet);
      if (!seen.insert(payload).second) continue;
      ExamplePair pair;
      pair.query = payload;
      pair.answer = payload;
      pair.suffix = SuffixClass::kNone;
      check_example_fits(pair, kFirstContentToken + 2 * kAlphabet, 96);
      out.push_back(std::move(pair));
    }
  };
  int n_test = std::max(1, n / 8);
  draw(split.train, n, kFirstContentToken);
  draw(split.test, n_test, disjoint_alphabets ? kFirstContentToken + kAlphabet : kFirstContentToken);
  return split;
}

SubsetResult subset_fraction(const DatasetSplit& split, int n, uint64_t seed,
                             bool half_compute) {
  if (n != 1 && n != 2 && n != 4 && n != 8 && n != 16 && n != 32)
    throw std::invalid_argument("subset_fraction: n must be in {1,2,4,8,16,32}");
  int train_size = static_cast<int>(split.train.size());
  if (train_size < n)
    throw std::invalid_argument("subset_fraction: train size " + std::to_string(train_size) +
                                " smaller than divisor " + std::to_string(n));
  SubsetResult result;
  result.split.generation_seed = split.generation_seed;
  result.split.task_tag = split.task_tag;
  result.split.test = split.test;
  result.epoch_multiplier = half_compute ? n / 2.0 : static_cast<double>(n);
  result.lr_scale = half_compute ? 2.0 : 1.0;

  if (n == 1) {
    result.split.train = split.train;
    return result;
  }
  int keep = train_size / n;
  std::vector<int> order(train_size);
  for (int i = 0; i < train_size; ++i) order[i] = i;
  Rng rng(mix_seed(seed, 0xF4AC710Bu, static_cast<uint64_t>(n)));
  for (int i = train_size - 1; i > 0; --i)
    std::swap(order[i], order[rng.below_int(i + 1)]);
  order.resize(keep);
  std::sort(order.begin(), order.end());  // keep original order within the subset
  for (int idx : order) result.split.train.push_back(split.train[idx]);
  return result;
}

ExamplePair prepend_instruction(const ExamplePair& pair, const std::vector<int>& inst_tokens,
                                int max_seq_len) {
  ExamplePair out = pair;
  out.instruction.insert(out.instruction.end(), inst_tokens.begin(), inst_tokens.end());
  if (out.full_length() > max_seq_len)
    throw std::invalid_argument("prepend_instruction: sequence would exceed max_seq_len " +
                                std::to_string(max_seq_len));
  return out;
}

std::vector<uint8_t> ntp_target_mask(const ExamplePair& pair) {
  SpanMarks m = pair.marks();
  int len = pair.full_length();
  std::vector<uint8_t> mask(len - 1, 0);
  // Target at position j is token j+1; supervise answer tokens and the EOS.
  int answer_start = m.query_end + 2;
  for (int j = 0; j < len - 1; ++j) {
    int predicted = j + 1;
    if (predicted >= answer_start && predicted <= m.answer_end) mask[j] = 1;
  }
  return mask;
}

void dump_split(const DatasetSplit& split, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("data: cannot open '" + path + "' for writing");
  auto write_examples = [&](const std::vector<ExamplePair>& examples, const char* section) {
    out << "# " << section << "\n";
    for (const ExamplePair& e : examples) {
      for (size_t i = 0; i < e.query.size(); ++i) out << (i ? " " : "") << e.query[i];
      out << "\t";
      for (size_t i = 0; i < e.answer.size(); ++i) out << (i ? " " : "") << e.answer[i];
      out << "\t" << suffix_class_name(e.suffix) << "\n";
    }
  };
  out << "# task " << split.task_tag << " seed " << split.generation_seed << "\n";
  write_examples(split.train, "train");
  write_examples(split.test, "test");
  if (!out) throw std::runtime_error("data: write failed for '" + path + "'");
}

DatasetSplit load_split(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("data: cannot open '" + path + "'");
  DatasetSplit split;
  split.task_tag = "loaded";
  std::vector<ExamplePair>* target = &split.train;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (line.find("# test") == 0) target = &split.test;
      continue;
    }
    size_t tab1 = line.find('\t');
    size_t tab2 = tab1 == std::string::npos ? std::string::npos : line.find('\t', tab1 + 1);
    if (tab2 == std::string::npos)
      throw std::runtime_error(path + ":" + std::to_string(line_no) +
                               ": expected query<TAB>answer<TAB>class");
    auto parse_ids = [&](const std::string& field) {
      std::vector<int> ids;
      std::istringstream iss(field);
      int id;
      while (iss >> id) ids.push_back(id);
      return ids;
    };
    ExamplePair pair;
    pair.query = parse_ids(line.substr(0, tab1));
    pair.answer = parse_ids(line.substr(tab1 + 1, tab2 - tab1 - 1));
    pair.suffix = suffix_class_from_name(line.substr(tab2 + 1));
    if (pair.answer.empty())
      throw std::runtime_error(path + ":" + std::to_string(line_no) + ": empty answer");
    target->push_back(std::move(pair));
  }
  return split;
}

}  // namespace stp
