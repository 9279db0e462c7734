#pragma once

// Brute-force reference for the counting loss: a direct, independent
// transcription of the gather / top-k hinge / count normalization pipeline,
// kept free of any production code path so the two can disagree.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <variant>
#include <vector>

#include "diffaug/reward.hpp"
#include "diffaug/scene.hpp"

namespace testutil {

inline double oracle_counting_loss(const diffaug::DetectorLogits& logits,
                                   const diffaug::PromptSpec& prompt, double tau,
                                   int64_t gamma, int64_t step) {
    if (step <= gamma) return 0.0;
    double numerator = 0.0;
    double denominator = 0.0;
    for (size_t j = 0; j < prompt.index_list.size(); ++j) {
        std::vector<double> scores;
        auto push_row = [&](int row) {
            for (int c = 0; c < logits.candidates; ++c)
                scores.push_back(logits.scores[static_cast<size_t>(row) * logits.candidates + c]);
        };
        if (std::holds_alternative<int>(prompt.index_list[j]))
            push_row(std::get<int>(prompt.index_list[j]));
        else
            for (int row : std::get<std::vector<int>>(prompt.index_list[j])) push_row(row);
        std::sort(scores.begin(), scores.end(), std::greater<double>());
        int k = prompt.counts[j];
        for (int i = 0; i < k; ++i) {
            double s = i < static_cast<int>(scores.size()) ? scores[i] : 0.0;
            if (tau - s > 0.0) numerator += tau - s;
        }
        denominator += k;
    }
    return numerator / denominator;
}

// Random prompt over an abstract token layout (not tied to any category
// table): up to four categories, one to three tokens each, counts that may
// exceed the candidate pool.
inline diffaug::PromptSpec random_prompt(std::mt19937_64& eng, int max_count) {
    diffaug::PromptSpec p;
    int n_cats = 1 + static_cast<int>(eng() % 4);
    int next_token = 0;
    for (int j = 0; j < n_cats; ++j) {
        int words = 1 + static_cast<int>(eng() % 3);
        std::string name;
        if (words == 1) {
            p.index_list.emplace_back(next_token);
            name = "tok" + std::to_string(next_token);
            ++next_token;
        } else {
            std::vector<int> idxs;
            for (int w = 0; w < words; ++w) {
                if (!name.empty()) name += " ";
                name += "tok" + std::to_string(next_token);
                idxs.push_back(next_token++);
            }
            p.index_list.emplace_back(std::move(idxs));
        }
        p.class_names.push_back(name);
        p.counts.push_back(1 + static_cast<int>(eng() % max_count));
        p.category_ids.push_back(j);
        if (!p.prompt_text.empty()) p.prompt_text += ". ";
        p.prompt_text += name;
    }
    return p;
}

inline diffaug::DetectorLogits random_logits(std::mt19937_64& eng, int tokens,
                                             int candidates) {
    diffaug::DetectorLogits l;
    l.tokens = tokens;
    l.candidates = candidates;
    l.scores.resize(static_cast<size_t>(tokens) * candidates);
    std::uniform_real_distribution<float> d(0.0f, 1.0f);
    for (auto& v : l.scores) v = d(eng);
    return l;
}

inline int prompt_token_count(const diffaug::PromptSpec& p) {
    int n = 0;
    for (const auto& e : p.index_list) {
        if (std::holds_alternative<int>(e))
            n = std::max(n, std::get<int>(e) + 1);
        else
            for (int ix : std::get<std::vector<int>>(e)) n = std::max(n, ix + 1);
    }
    return n;
}

}  // namespace testutil
