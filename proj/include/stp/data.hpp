#pragma once

// Synthetic two-view (query, answer) sequence tasks, with fraction subsetting
// and epoch scaling for the data-efficiency protocol.

#include <cstdint>
#include <string>
#include <vector>

#include "stp/transformer.hpp"

namespace stp {

inline constexpr int kSepToken = 4;
inline constexpr int kFirstContentToken = 5;

enum class SuffixClass { kStar, kStarStar, kNone };
const char* suffix_class_name(SuffixClass c);
SuffixClass suffix_class_from_name(const std::string& name);

// Positions inside the full sequence BOS + [inst] + query + SEP + answer + EOS.
// query_start/query_end index the first/last query token; answer_end indexes
// the EOS that terminates the answer.
struct SpanMarks {
  int query_start = 0;
  int query_end = 0;
  int answer_end = 0;
};

struct ExamplePair {
  std::vector<int> instruction;  // empty unless prepend_instruction was applied
  std::vector<int> query;
  std::vector<int> answer;
  SuffixClass suffix = SuffixClass::kNone;

  std::vector<int> full_sequence() const;
  SpanMarks marks() const;
  int full_length() const;
};

struct DatasetSplit {
  std::vector<ExamplePair> train;
  std::vector<ExamplePair> test;
  uint64_t generation_seed = 0;
  std::string task_tag;
};

// Descriptor-to-pattern transduction task. A query is k clauses of
// (operator, argument) descriptor tokens; the answer translates each clause to
// its pattern atoms separated by STAR. Answers whose last clause argument
// comes from the minority pool end with STAR STAR instead of STAR, and that
// pool is sampled with probability 1/(1+suffix_ratio), so suffixes are
// class-imbalanced yet fully determined by the query (exact match solvable).
// Queries are sampled without replacement, so train and test are disjoint.
DatasetSplit generate_pattern_task(uint64_t seed, int n_train, int n_test,
                                   double suffix_ratio);

// query = random payload, answer = the same payload. With
// disjoint_alphabets, train and test payloads draw from disjoint token pools.
DatasetSplit generate_copy_task(uint64_t seed, int n, int payload_len,
                                bool disjoint_alphabets = false);

struct SubsetResult {
  DatasetSplit split;          // test carried over unchanged
  double epoch_multiplier;     // n, or n/2 under half compute
  double lr_scale;             // 1, or 2 under half compute
};

// Uniform sample without replacement of floor(train/n) examples.
SubsetResult subset_fraction(const DatasetSplit& split, int n, uint64_t seed,
                             bool half_compute = false);

ExamplePair prepend_instruction(const ExamplePair& pair, const std::vector<int>& inst_tokens,
                                int max_seq_len);

// Mask over next-token targets (length full_length() - 1): exactly the answer
// span plus its EOS is supervised.
std::vector<uint8_t> ntp_target_mask(const ExamplePair& pair);

// One example per line: query ids <TAB> answer ids <TAB> suffix class,
// ids space-separated.
void dump_split(const DatasetSplit& split, const std::string& path);
DatasetSplit load_split(const std::string& path);

}  // namespace stp
