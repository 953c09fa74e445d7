#include "ssmax/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ssx {

const std::array<const char*, 64>& Corpus::city_list() {
    static const std::array<const char*, 64> cities = {
        "Tokyo",    "Paris",   "London",  "Berlin",  "Madrid",    "Rome",     "Vienna",
        "Prague",   "Lisbon",  "Dublin",  "Oslo",    "Helsinki",  "Warsaw",   "Athens",
        "Cairo",    "Lagos",   "Nairobi", "Tunis",   "Rabat",     "Accra",    "Dakar",
        "Lima",     "Bogota",  "Quito",   "Santiago", "Caracas",  "Havana",   "Toronto",
        "Ottawa",   "Boston",  "Denver",  "Austin",  "Dallas",    "Seattle",  "Phoenix",
        "Chicago",  "Houston", "Miami",   "Atlanta", "Detroit",   "Mumbai",   "Delhi",
        "Chennai",  "Kolkata", "Jaipur",  "Lahore",  "Karachi",   "Dhaka",    "Kathmandu",
        "Colombo",  "Bangkok", "Hanoi",   "Manila",  "Jakarta",   "Seoul",    "Busan",
        "Osaka",    "Kyoto",   "Nagoya",  "Sapporo", "Sydney",    "Perth",    "Auckland",
        "Suva"};
    return cities;
}

std::string Corpus::make_needle(const std::string& city, const std::string& digits) {
    return "The special magic " + city + " number is: " + digits + ".";
}

std::string Corpus::make_prompt(const std::string& city) {
    // ends right where the answer digits begin, so the first generated token
    // is the first digit
    return "\nThe special magic " + city + " number is: ";
}

std::string Corpus::random_digits(Rng& rng) {
    std::string d;
    d.push_back(static_cast<char>('1' + rng.below(9)));
    for (int i = 0; i < 6; ++i) d.push_back(static_cast<char>('0' + rng.below(10)));
    return d;
}

Corpus::Corpus(const CorpusConfig& cfg) : cfg_(cfg) {
    const std::string alpha = "abcdefghijklmnopqrstuvwxyz .,";
    alphabet_.assign(alpha.begin(), alpha.end());
    next_.resize(alphabet_.size());
    uint64_t x = cfg.corpus_seed;
    for (size_t i = 0; i < alphabet_.size(); ++i)
        for (int j = 0; j < 4; ++j)
            next_[i][static_cast<size_t>(j)] =
                alphabet_[splitmix64(x) % alphabet_.size()];
}

void Corpus::fill_filler(Rng& rng, int* out, int len) const {
    size_t state = rng.below(alphabet_.size());
    for (int i = 0; i < len; ++i) {
        out[i] = static_cast<int>(alphabet_[state]);
        // successor weights 0.45 / 0.25 / 0.2 / 0.1
        const double u = rng.uniform();
        const int pick = u < 0.45 ? 0 : u < 0.70 ? 1 : u < 0.90 ? 2 : 3;
        const uint8_t nxt = next_[state][static_cast<size_t>(pick)];
        state = static_cast<size_t>(
            std::find(alphabet_.begin(), alphabet_.end(), nxt) - alphabet_.begin());
    }
}

Corpus::RecallParts Corpus::draw_recall(Rng& rng) const {
    RecallParts p;
    p.city = city_list()[rng.below(city_list().size())];
    p.digits = random_digits(rng);
    p.needle = make_needle(p.city, p.digits);
    p.prompt = make_prompt(p.city);
    return p;
}

// Multi-needle recall: `num_queries` needles for distinct cities embedded in
// the filler, then prompt + answer pairs for each of them at the tail. The
// reported span covers the final query's answer.
void Corpus::write_recall(Rng& rng, int* out, int len, int num_queries, int* answer_begin,
                          int* answer_end) const {
    // worst case ~95 tokens per query (needle 47, prompt 40, answer 8);
    // degrade to fewer queries rather than fail when the sequence is short
    while (num_queries > 1 && num_queries * 100 > len) --num_queries;
    std::vector<RecallParts> parts;
    for (int q = 0; q < num_queries; ++q) {
        for (int attempt = 0; attempt < 20; ++attempt) {
            RecallParts p = draw_recall(rng);
            bool dup = false;
            for (const auto& other : parts) dup = dup || other.city == p.city;
            if (!dup) {
                parts.push_back(std::move(p));
                break;
            }
        }
    }

    int tail = 0;
    int max_needle = 0;
    for (const auto& p : parts) {
        tail += static_cast<int>(p.prompt.size()) + 8;
        max_needle = std::max(max_needle, static_cast<int>(p.needle.size()));
    }
    const int haystack_end = len - tail;
    if (haystack_end < max_needle * static_cast<int>(parts.size()))
        throw std::out_of_range("recall sequence too short for needles + prompts");

    fill_filler(rng, out, len);

    // non-overlapping needle placements
    std::vector<std::pair<int, int>> placed;
    for (const auto& p : parts) {
        const int nl = static_cast<int>(p.needle.size());
        for (int attempt = 0; attempt < 40; ++attempt) {
            const int pos =
                static_cast<int>(rng.below(static_cast<uint64_t>(haystack_end - nl + 1)));
            bool clash = false;
            for (const auto& [a, b] : placed)
                clash = clash || (pos < b && pos + nl > a);
            if (clash) continue;
            for (int i = 0; i < nl; ++i) out[pos + i] = p.needle[static_cast<size_t>(i)];
            placed.push_back({pos, pos + nl});
            break;
        }
    }

    int cursor = haystack_end;
    int last_ans_begin = 0;
    for (const auto& p : parts) {
        for (size_t i = 0; i < p.prompt.size(); ++i)
            out[cursor + static_cast<int>(i)] = p.prompt[i];
        cursor += static_cast<int>(p.prompt.size());
        const std::string answer = p.digits + ".";
        last_ans_begin = cursor;
        for (size_t i = 0; i < answer.size(); ++i)
            out[cursor + static_cast<int>(i)] = answer[i];
        cursor += static_cast<int>(answer.size());
    }
    if (answer_begin) *answer_begin = last_ans_begin;
    if (answer_end) *answer_end = last_ans_begin + 8;
}

// Re-inserts one or two earlier chunks of the sequence further along; the
// repeated substrings are what give copy/induction heads their gradient.
void Corpus::repeat_chunks(Rng& rng, int* out, int len) const {
    if (len < 64) return;
    const int copies = 1 + static_cast<int>(rng.below(2));
    for (int c = 0; c < copies; ++c) {
        const int chunk = 16 + static_cast<int>(rng.below(49));  // 16..64
        if (2 * chunk >= len) continue;
        const int src = static_cast<int>(rng.below(static_cast<uint64_t>(len - 2 * chunk)));
        const int dst_lo = src + chunk;
        const int dst =
            dst_lo + static_cast<int>(rng.below(static_cast<uint64_t>(len - chunk - dst_lo + 1)));
        for (int i = 0; i < chunk; ++i) out[dst + i] = out[src + i];
    }
}

// Pattern of random period 3..48 over the filler alphabet, repeated to fill.
void Corpus::fill_periodic(Rng& rng, int* out, int len) const {
    const int period = 3 + static_cast<int>(rng.below(46));
    std::vector<int> pat(static_cast<size_t>(period));
    fill_filler(rng, pat.data(), period);
    for (int i = 0; i < len; ++i) out[i] = pat[static_cast<size_t>(i % period)];
}

std::vector<int> Corpus::gen_sequence(Rng& rng, int len) const {
    std::vector<int> out(static_cast<size_t>(len));
    // longest single recall layout: needle (<= 47) + prompt (<= 40) + answer (8)
    constexpr int kMinRecallLen = 95;
    const double u = rng.uniform();
    if (u < cfg_.periodic_fraction) {
        fill_periodic(rng, out.data(), len);
    } else if (len >= kMinRecallLen && u < cfg_.periodic_fraction + cfg_.recall_fraction) {
        const double uq = rng.uniform();
        const int nq = len >= 2 * kMinRecallLen ? (uq < 0.45 ? 1 : uq < 0.8 ? 2 : 3) : 1;
        write_recall(rng, out.data(), len, nq, nullptr, nullptr);
    } else {
        fill_filler(rng, out.data(), len);
        repeat_chunks(rng, out.data(), len);
    }
    return out;
}

Corpus::SftRow Corpus::gen_sft_row(Rng& rng, int len) const {
    SftRow row;
    row.tokens.assign(static_cast<size_t>(len), 0);
    const int nq = rng.uniform() < cfg_.two_needle_fraction ? 2 : 1;
    write_recall(rng, row.tokens.data(), len, nq, &row.answer_begin, &row.answer_end);
    return row;
}

NeedleSample generate_niah(const Corpus& corpus, int context_size, double depth, Rng& rng) {
    NeedleSample s;
    s.depth = depth;
    s.city = Corpus::city_list()[rng.below(Corpus::city_list().size())];
    s.answer = Corpus::random_digits(rng);
    const std::string needle = Corpus::make_needle(s.city, s.answer);
    const std::string prompt = Corpus::make_prompt(s.city);
    const int span_len = 8;  // 7 digits + '.'
    const int prefix_len = static_cast<int>(needle.size()) - span_len;

    // the span (the digits) starts at the token index nearest depth * size
    const int span_begin = static_cast<int>(std::llround(depth * context_size));
    const int needle_start = span_begin - prefix_len;
    const int prompt_start = context_size - static_cast<int>(prompt.size());
    if (needle_start < 0 || span_begin + span_len > prompt_start)
        throw std::out_of_range("generate_niah: context too small for needle + prompt");

    s.tokens.assign(static_cast<size_t>(context_size), 0);
    corpus.fill_filler(rng, s.tokens.data(), context_size);
    for (size_t i = 0; i < needle.size(); ++i)
        s.tokens[static_cast<size_t>(needle_start) + i] = needle[i];
    for (size_t i = 0; i < prompt.size(); ++i)
        s.tokens[static_cast<size_t>(prompt_start) + i] = prompt[i];
    s.span_begin = span_begin;
    s.span_end = span_begin + span_len;
    return s;
}

}  // namespace ssx
