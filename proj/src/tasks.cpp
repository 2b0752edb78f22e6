#include "relulab/tasks.hpp"

#include <algorithm>
#include <numeric>

namespace relulab {

std::string to_string(TaskKind kind) {
    switch (kind) {
        case TaskKind::Copy: return "copy";
        case TaskKind::Reverse: return "reverse";
        case TaskKind::KeyLookup: return "key-lookup";
    }
    return "unknown";
}

TaskKind task_kind_from_string(const std::string& name) {
    if (name == "copy") return TaskKind::Copy;
    if (name == "reverse") return TaskKind::Reverse;
    if (name == "key-lookup") return TaskKind::KeyLookup;
    throw ContractViolation("unknown task kind '" + name + "'");
}

LookupRanges lookup_ranges(std::size_t vocab) {
    const auto content = static_cast<Token>(vocab) - kFirstContentToken;
    const Token third = content / 3;
    LookupRanges r{};
    r.key_begin = kFirstContentToken;
    r.key_end = r.key_begin + third;
    r.value_begin = r.key_end;
    r.value_end = r.value_begin + third;
    r.filler_begin = r.value_end;
    r.filler_end = static_cast<Token>(vocab);
    return r;
}

void validate(const TaskSpec& spec) {
    if (spec.length_limit < 2) throw ContractViolation("task: length limit must be >= 2");
    if (spec.examples == 0) throw ContractViolation("task: need at least one example");
    if (spec.vocab <= static_cast<std::size_t>(kFirstContentToken)) {
        throw ContractViolation("task: vocab must exceed the reserved tokens");
    }
    if (spec.kind == TaskKind::KeyLookup) {
        const auto r = lookup_ranges(spec.vocab);
        if (spec.lookup_pairs == 0) throw ContractViolation("task: key-lookup needs at least one pair");
        if (static_cast<std::size_t>(r.key_end - r.key_begin) < spec.lookup_pairs || r.filler_end <= r.filler_begin) {
            throw ContractViolation("task: vocab " + std::to_string(spec.vocab) + " too small for key-lookup with " +
                                    std::to_string(spec.lookup_pairs) + " distinct keys");
        }
        // queries + SEP + pairs must fit in the shortest source
        if (3 * spec.lookup_pairs + 1 > spec.length_limit / 2) {
            throw ContractViolation("task: length limit too small for " + std::to_string(spec.lookup_pairs) + " pairs");
        }
    }
}

Example make_copy_example(std::vector<Token> src) {
    Example e{src, src};
    return e;
}

Example make_reverse_example(std::vector<Token> src) {
    Example e{src, src};
    std::reverse(e.tgt.begin(), e.tgt.end());
    return e;
}

Example make_key_lookup_example(std::span<const std::pair<Token, Token>> pairs, std::span<const Token> queries,
                                std::span<const Token> body) {
    Example e;
    e.src.assign(queries.begin(), queries.end());
    e.src.push_back(kSepToken);
    e.src.insert(e.src.end(), body.begin(), body.end());
    for (Token q : queries) {
        const auto it = std::find_if(pairs.begin(), pairs.end(), [q](const auto& kv) { return kv.first == q; });
        if (it == pairs.end()) throw ContractViolation("key-lookup: query " + std::to_string(q) + " has no pair");
        e.tgt.push_back(it->second);
    }
    return e;
}

namespace {

Token draw(Rng& rng, Token begin, Token end) {
    return begin + static_cast<Token>(rng.uniform_int(static_cast<std::uint64_t>(end - begin)));
}

Example lookup_example(const TaskSpec& spec, std::size_t length, Rng& rng) {
    const auto r = lookup_ranges(spec.vocab);
    const std::size_t m = spec.lookup_pairs;

    std::vector<Token> keys(static_cast<std::size_t>(r.key_end - r.key_begin));
    std::iota(keys.begin(), keys.end(), r.key_begin);
    for (std::size_t i = 0; i < m; ++i) std::swap(keys[i], keys[i + rng.uniform_int(keys.size() - i)]);
    keys.resize(m);

    std::vector<std::pair<Token, Token>> pairs;
    for (Token k : keys) pairs.emplace_back(k, draw(rng, r.value_begin, r.value_end));

    // Body: filler with m two-token slots. Choosing m gap sizes that sum to
    // (body - 2m) places the pairs uniformly without overlap.
    const std::size_t body_len = length - m - 1;
    const std::size_t free_slots = body_len - 2 * m;
    std::vector<std::size_t> cuts(m);
    for (auto& c : cuts) c = rng.uniform_int(free_slots + 1);
    std::sort(cuts.begin(), cuts.end());
    std::vector<Token> body;
    body.reserve(body_len);
    std::size_t placed_filler = 0;
    for (std::size_t i = 0; i < m; ++i) {
        for (; placed_filler < cuts[i]; ++placed_filler) body.push_back(draw(rng, r.filler_begin, r.filler_end));
        body.push_back(pairs[i].first);
        body.push_back(pairs[i].second);
    }
    for (; placed_filler < free_slots; ++placed_filler) body.push_back(draw(rng, r.filler_begin, r.filler_end));

    std::vector<Token> queries = keys;
    for (std::size_t i = 0; i + 1 < queries.size(); ++i) {
        std::swap(queries[i], queries[i + rng.uniform_int(queries.size() - i)]);
    }
    return make_key_lookup_example(pairs, queries, body);
}

}  // namespace

std::vector<Example> generate(const TaskSpec& spec) {
    validate(spec);
    Rng rng(spec.seed);
    const std::size_t lo = spec.length_limit / 2;
    const std::size_t hi = spec.length_limit;
    std::vector<Example> out;
    out.reserve(spec.examples);
    for (std::size_t e = 0; e < spec.examples; ++e) {
        const std::size_t length = lo + rng.uniform_int(hi - lo + 1);
        if (spec.kind == TaskKind::KeyLookup) {
            out.push_back(lookup_example(spec, length, rng));
            continue;
        }
        std::vector<Token> src(length);
        for (auto& t : src) t = draw(rng, kFirstContentToken, static_cast<Token>(spec.vocab));
        out.push_back(spec.kind == TaskKind::Copy ? make_copy_example(std::move(src))
                                                  : make_reverse_example(std::move(src)));
    }
    return out;
}

}  // namespace relulab
