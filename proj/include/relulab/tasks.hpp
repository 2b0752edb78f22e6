#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "relulab/model.hpp"

namespace relulab {

enum class TaskKind { Copy, Reverse, KeyLookup };

std::string to_string(TaskKind kind);
TaskKind task_kind_from_string(const std::string& name);

struct TaskSpec {
    TaskKind kind = TaskKind::Copy;
    std::size_t length_limit = 64;  // L; source lengths are uniform in [L/2, L]
    std::size_t vocab = 32;
    std::size_t examples = 1000;
    std::uint64_t seed = 1;
    std::size_t lookup_pairs = 8;   // KeyLookup: pairs hidden in each source
};

struct Example {
    std::vector<Token> src;
    std::vector<Token> tgt;
};

void validate(const TaskSpec& spec);

/// Deterministic dataset for `spec`.
///
/// Copy and Reverse draw content tokens uniformly. KeyLookup splits the
/// content vocabulary into key, value, and filler ranges; a source is the
/// query keys, SEP, then filler with the (key, value) pairs embedded at
/// random non-overlapping positions. The target lists each query's value.
std::vector<Example> generate(const TaskSpec& spec);

Example make_copy_example(std::vector<Token> src);
Example make_reverse_example(std::vector<Token> src);

/// Builds one lookup example: `queries` first, SEP, then `body`, in which the
/// pairs must already appear as adjacent (key, value) tokens.
Example make_key_lookup_example(std::span<const std::pair<Token, Token>> pairs, std::span<const Token> queries,
                                std::span<const Token> body);

struct LookupRanges {
    Token key_begin, key_end;      // [begin, end)
    Token value_begin, value_end;
    Token filler_begin, filler_end;
};
LookupRanges lookup_ranges(std::size_t vocab);

}  // namespace relulab
