#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <nlohmann/json.hpp>

#include "counting_oracle.hpp"
#include "diffaug/reward.hpp"
#include "diffaug/scene.hpp"
#include "helpers.hpp"

using namespace diffaug;
using testutil::oracle_counting_loss;
using testutil::prompt_token_count;
using testutil::random_logits;
using testutil::random_prompt;
using testutil::random_vec;

namespace {

DetectorConfig tiny_det_cfg() {
    DetectorConfig c;
    c.image_size = 32;
    c.grid = 4;
    c.base_channels = 8;
    c.norm_groups = 4;
    for (const auto& cat : default_categories()) c.vocabulary.push_back(cat.name);
    return c;
}

PromptSpec prompt_of(const std::vector<std::pair<std::string, int>>& cats) {
    CategoryCounts counts;
    auto table = default_categories();
    for (const auto& [name, n] : cats) {
        counts.class_names.push_back(name);
        counts.counts.push_back(n);
        for (const auto& c : table)
            if (c.name == name) counts.category_ids.push_back(c.id);
    }
    return build_prompt(counts);
}

Image random_image(int side, uint64_t seed) {
    Image img(side, side, 3);
    img.data = random_vec(img.size(), seed, 0.0f, 1.0f);
    return img;
}

}  // namespace

TEST_CASE("gather_category_scores: rows, concatenation, errors") {
    DetectorLogits l;
    l.tokens = 3;
    l.candidates = 64;
    l.scores.resize(3 * 64);
    for (int t = 0; t < 3; ++t)
        for (int c = 0; c < 64; ++c) l.scores[t * 64 + c] = t + c * 0.001f;

    std::vector<float> row0 = gather_category_scores(l, TokenIndexEntry{0});
    REQUIRE(row0.size() == 64);
    for (int c = 0; c < 64; ++c) CHECK(row0[c] == doctest::Approx(c * 0.001f));

    std::vector<float> rows12 = gather_category_scores(l, TokenIndexEntry{std::vector<int>{1, 2}});
    REQUIRE(rows12.size() == 128);
    CHECK(rows12[0] == doctest::Approx(1.0f));
    CHECK(rows12[64] == doctest::Approx(2.0f));
    CHECK(rows12[127] == doctest::Approx(2.0f + 63 * 0.001f));

    CHECK_THROWS_AS(gather_category_scores(l, TokenIndexEntry{std::vector<int>{}}),
                    std::invalid_argument);
    CHECK_THROWS_AS(gather_category_scores(l, TokenIndexEntry{5}), std::out_of_range);
}

TEST_CASE("class_loss hand oracles") {
    CHECK(class_loss({0.9f, 0.8f}, 2, 0.1) == doctest::Approx(0.0));
    // relu(0.1-0.25) + relu(0.1-0.06) = 0 + 0.04, evaluated at float inputs
    double want_06 = 0.1 - static_cast<double>(0.06f);
    CHECK(class_loss({0.25f, 0.06f, 0.01f}, 2, 0.1) ==
          doctest::Approx(want_06).epsilon(1e-12));
    // shortfall pads with zeros: 0.05 + 0.1 + 0.1
    CHECK(class_loss({0.05f}, 3, 0.1) == doctest::Approx(0.25).epsilon(1e-9));
    CHECK_THROWS_AS(class_loss({0.5f}, 0, 0.1), std::invalid_argument);
}

TEST_CASE("counting_loss_from_logits: gate and hand-evaluated normalization") {
    CountingLossConfig cfg;
    cfg.tau = 0.1;
    cfg.gamma = 1000;

    // gate: step 0 with gamma 1000 contributes nothing
    std::mt19937_64 eng(3);
    DetectorLogits l = random_logits(eng, 3, 64);
    PromptSpec p = prompt_of({{"circle", 2}, {"red triangle", 1}});
    CHECK(counting_loss_from_logits(l, p, cfg, 0) == 0.0);
    CHECK(counting_loss_from_logits(l, p, cfg, 1000) == 0.0);
    CHECK(counting_loss_from_logits(l, p, cfg, 1001) >= 0.0);

    // craft logits so the class losses are 0.04 and 0.08 with counts 2 and 1:
    // loss = (0.04 + 0.08) / 3
    DetectorLogits crafted;
    crafted.tokens = 3;  // "circle", "red", "triangle"
    crafted.candidates = 4;
    crafted.scores = {
        0.9f, 0.07f, 0.01f, 0.02f,   // circle row: top2 = {0.9, 0.07} -> 0 + 0.03...
        0.02f, 0.01f, 0.0f, 0.0f,    // red row
        0.02f, 0.01f, 0.0f, 0.0f,    // triangle row
    };
    // adjust: circle top-2 = {0.9, 0.07} gives relu(.1-.9)+relu(.1-.07)=0.03;
    // want 0.04 -> use 0.06
    crafted.scores[1] = 0.06f;
    // red+triangle concatenated top-1 = 0.02 -> relu(0.1-0.02) = 0.08
    double got = counting_loss_from_logits(crafted, p, cfg, 2000);
    double want = ((0.1 - static_cast<double>(0.06f)) + (0.1 - static_cast<double>(0.02f))) / 3.0;
    CHECK(got == doctest::Approx(want).epsilon(1e-12));

    // saturated hinges: everything above tau
    DetectorLogits high = crafted;
    for (auto& v : high.scores) v = 0.5f;
    CHECK(counting_loss_from_logits(high, p, cfg, 2000) == 0.0);

    // disabled flag skips regardless of step
    CountingLossConfig off = cfg;
    off.enabled = false;
    CHECK(counting_loss_from_logits(crafted, p, off, 9999) == 0.0);
}

TEST_CASE("oracle equivalence over randomized prompts, taus and counts") {
    std::mt19937_64 eng(2024);
    std::uniform_real_distribution<double> tau_d(0.05, 0.95);
    for (int trial = 0; trial < 250; ++trial) {
        PromptSpec p = random_prompt(eng, /*max_count=*/70);
        int tokens = prompt_token_count(p);
        int candidates = 8 + static_cast<int>(eng() % 57);  // 8..64
        DetectorLogits l = random_logits(eng, tokens, candidates);
        CountingLossConfig cfg;
        cfg.tau = tau_d(eng);
        cfg.gamma = 10;
        double mine = counting_loss_from_logits(l, p, cfg, 11);
        double want = oracle_counting_loss(l, p, cfg.tau, cfg.gamma, 11);
        CHECK(std::abs(mine - want) <= 1e-9);

        // the tape node agrees with the scalar path at float resolution
        Tape tape;
        Tensor scores = tape.input({tokens, candidates}, l.scores);
        Tensor node = counting_loss_node(scores, p, cfg.tau);
        CHECK(node.scalar() == doctest::Approx(want).epsilon(1e-6));
    }
}

TEST_CASE("counting_loss_node gradient: finite differences, top-k routing") {
    std::mt19937_64 eng(515);
    for (int trial = 0; trial < 10; ++trial) {
        PromptSpec p = random_prompt(eng, 6);
        int tokens = prompt_token_count(p);
        DetectorLogits l = random_logits(eng, tokens, 16);
        double tau = 0.6;  // plenty of active hinges on uniform scores

        Tape tape;
        Tensor scores = tape.leaf_grad({tokens, 16}, l.scores.data());
        Tensor loss = counting_loss_node(scores, p, tau);
        tape.backward(loss);
        const float* grad = scores.grad_data();
        REQUIRE(grad != nullptr);

        auto numeric = testutil::finite_diff(
            [&](const std::vector<float>& v) {
                DetectorLogits l2 = l;
                l2.scores = v;
                return oracle_counting_loss(l2, p, tau, 0, 1);
            },
            l.scores, 1e-4);
        CHECK(testutil::max_rel_err(numeric, grad) < 1e-3);
    }

    // all top-k above tau: gradient is exactly zero everywhere
    PromptSpec p = prompt_of({{"circle", 2}});
    std::vector<float> high(1 * 8, 0.9f);
    Tape tape;
    Tensor scores = tape.leaf_grad({1, 8}, high.data());
    Tensor loss = counting_loss_node(scores, p, 0.1);
    CHECK(loss.scalar() == 0.0f);
    tape.backward(loss);
    const float* g = scores.grad_data();
    for (int i = 0; i < 8; ++i) CHECK(g[i] == 0.0f);
}

TEST_CASE("monotonicity and out-of-top-k insensitivity") {
    PromptSpec p = prompt_of({{"circle", 2}});
    std::vector<float> base{0.05f, 0.03f, 0.02f, 0.01f};
    CountingLossConfig cfg;
    cfg.tau = 0.1;
    cfg.gamma = 0;
    DetectorLogits l;
    l.tokens = 1;
    l.candidates = 4;
    l.scores = base;
    double l0 = counting_loss_from_logits(l, p, cfg, 1);

    // raising a selected below-threshold score strictly decreases the loss
    l.scores[0] = 0.06f;
    CHECK(counting_loss_from_logits(l, p, cfg, 1) < l0);

    // perturbing scores outside the top-k (and below them) changes nothing
    l.scores = base;
    l.scores[3] = 0.025f;  // still rank 3 of top-2 selection
    CHECK(counting_loss_from_logits(l, p, cfg, 1) == doctest::Approx(l0).epsilon(1e-12));
}

TEST_CASE("normalization law under duplicated categories") {
    // doubling every count doubles the numerator terms drawn from padding
    // and the denominator consistently
    DetectorLogits l;
    l.tokens = 2;
    l.candidates = 4;
    l.scores = {0.0f, 0.0f, 0.0f, 0.0f, 0.0f, 0.0f, 0.0f, 0.0f};
    PromptSpec p1 = prompt_of({{"circle", 1}, {"square", 1}});
    PromptSpec p2 = prompt_of({{"circle", 2}, {"square", 2}});
    CountingLossConfig cfg;
    cfg.tau = 0.4;
    cfg.gamma = 0;
    // all-zero scores: every selected slot costs tau, so both normalize to tau
    CHECK(counting_loss_from_logits(l, p1, cfg, 1) == doctest::Approx(0.4).epsilon(1e-12));
    CHECK(counting_loss_from_logits(l, p2, cfg, 1) == doctest::Approx(0.4).epsilon(1e-12));
}

TEST_CASE("detect: shapes, determinism, vocabulary mismatch") {
    DetectorConfig cfg = tiny_det_cfg();
    GridDetector det(cfg, 17);
    Image img = random_image(32, 21);
    PromptSpec p = prompt_of({{"circle", 1}, {"red triangle", 2}});

    DetectorLogits l = detect(img, p, det);
    CHECK(l.tokens == 3);
    CHECK(l.candidates == 16);
    for (float v : l.scores) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }
    DetectorLogits l2 = detect(img, p, det);
    CHECK(l.scores == l2.scores);

    // both tokens of a multi-word category carry that category's heatmap
    std::vector<float> red = gather_category_scores(l, p.index_list[1]);
    for (int c = 0; c < 16; ++c) CHECK(red[c] == red[16 + c]);

    PromptSpec bad = p;
    bad.class_names[0] = "hexagon";
    CHECK_THROWS_AS(detect(img, bad, det), std::invalid_argument);
}

TEST_CASE("count_detections agrees with an independent peak scan") {
    DetectorConfig cfg = tiny_det_cfg();
    GridDetector det(cfg, 23);
    PromptSpec p = prompt_of({{"circle", 1}, {"square", 1}, {"red triangle", 1}});
    for (uint64_t seed = 0; seed < 6; ++seed) {
        Image img = random_image(32, 100 + seed);
        double threshold = 0.45 + 0.02 * seed;
        std::vector<int> got = count_detections(img, p, det, threshold);

        DetectorLogits l = detect(img, p, det);
        std::vector<int> want;
        for (const auto& entry : p.index_list) {
            // aggregate token rows by element-wise max
            std::vector<float> agg(16, 0.0f);
            std::vector<int> idxs;
            if (std::holds_alternative<int>(entry))
                idxs = {std::get<int>(entry)};
            else
                idxs = std::get<std::vector<int>>(entry);
            for (int ix : idxs)
                for (int c = 0; c < 16; ++c) agg[c] = std::max(agg[c], l.at(ix, c));
            // brute-force 3x3 local maxima with scan-order tie break
            int count = 0;
            for (int y = 0; y < 4; ++y)
                for (int x = 0; x < 4; ++x) {
                    float v = agg[y * 4 + x];
                    if (v < threshold) continue;
                    bool peak = true;
                    for (int dy = -1; dy <= 1; ++dy)
                        for (int dx = -1; dx <= 1; ++dx) {
                            if (!dy && !dx) continue;
                            int ny = y + dy, nx = x + dx;
                            if (ny < 0 || ny > 3 || nx < 0 || nx > 3) continue;
                            float nv = agg[ny * 4 + nx];
                            if (nv > v || (nv == v && (ny < y || (ny == y && nx < x))))
                                peak = false;
                        }
                    if (peak) ++count;
                }
            want.push_back(count);
        }
        CHECK(got == want);
    }
    // sigmoid never reaches 1, so threshold 1.0 counts nothing
    Image img = random_image(32, 7);
    std::vector<int> zero = count_detections(img, p, det, 1.0);
    for (int c : zero) CHECK(c == 0);
    CHECK_THROWS_AS(count_detections(img, p, det, 0.0), std::invalid_argument);
}

TEST_CASE("counting gradient flows through the detector to image pixels") {
    DetectorConfig cfg = tiny_det_cfg();
    GridDetector det(cfg, 31);
    Image img = random_image(32, 55);
    PromptSpec p = prompt_of({{"circle", 2}});
    double tau = 0.99;  // hinges active unless a score clears 0.99

    std::vector<float> chw = to_chw(img);
    Tape tape;
    Tensor x = tape.leaf_grad({1, 3, 32, 32}, chw.data());
    Tensor scores = det.token_scores_node(tape, x, p);
    Tensor loss = counting_loss_node(scores, p, tau);
    REQUIRE(loss.scalar() > 0.0f);
    tape.backward(loss);
    const float* grad = x.grad_data();
    REQUIRE(grad != nullptr);

    // spot-check a few pixels against central differences
    std::mt19937_64 eng(9);
    for (int k = 0; k < 6; ++k) {
        size_t idx = eng() % chw.size();
        double h = 2e-3;
        auto eval = [&](float v) {
            std::vector<float> mod = chw;
            mod[idx] = v;
            Tape t2;
            t2.set_grad_enabled(false);
            Tensor x2 = t2.input({1, 3, 32, 32}, mod);
            Tensor s2 = det.token_scores_node(t2, x2, p);
            DetectorLogits l;
            l.tokens = s2.dims()[0];
            l.candidates = s2.dims()[1];
            l.scores.assign(s2.data(), s2.data() + s2.size());
            return oracle_counting_loss(l, p, tau, 0, 1);
        };
        double fd = (eval(chw[idx] + static_cast<float>(h)) -
                     eval(chw[idx] - static_cast<float>(h))) /
                    (2 * h);
        double denom = std::max(std::abs(fd), 1e-4);
        CHECK(std::abs(fd - grad[idx]) / denom < 0.05);
    }
}

TEST_CASE("counting_loss_report carries per-category top-k scores") {
    DetectorConfig cfg = tiny_det_cfg();
    GridDetector det(cfg, 3);
    Image img = random_image(32, 77);
    PromptSpec p = prompt_of({{"circle", 2}, {"blue square", 1}});
    CountingLossConfig ccfg;
    ccfg.tau = 0.1;
    ccfg.gamma = 0;
    nlohmann::json rep = counting_loss_report(img, p, det, ccfg, 5);
    REQUIRE(rep.at("categories").size() == 2);
    CHECK(rep.at("categories")[0].at("topk_scores").size() == 2);
    CHECK(rep.at("categories")[1].at("name").get<std::string>() == "blue square");
    CHECK(!rep.at("gated").get<bool>());
    double total = rep.at("counting_loss").get<double>();
    DetectorLogits l = detect(img, p, det);
    CHECK(total == doctest::Approx(oracle_counting_loss(l, p, 0.1, 0, 5)).epsilon(1e-9));
}

TEST_CASE("detector pretraining smoke run and underfit error") {
    SceneGenConfig gen;
    gen.image_size = 32;
    gen.count_min = 1;
    gen.count_max = 2;
    gen.min_box = 8;
    gen.max_box = 12;
    gen.min_same_category_center_dist = 12.0;
    std::vector<Scene> scenes = generate_dataset(gen, 32, 313);

    DetectorConfig cfg = tiny_det_cfg();
    DetectorPretrainConfig train;
    train.max_steps = 60;
    train.batch_size = 8;
    train.eval_every = 30;
    train.accuracy_bar = 0.05;  // smoke budget
    nlohmann::json metrics;
    DetectorModel model = pretrain_detector(scenes, gen.categories, cfg, train, &metrics);
    CHECK(model.net->params().trainable().empty());
    CHECK(metrics.at("counting_accuracy").get<double>() >= 0.05);

    testutil::TmpDir tmp("detector");
    model.save(tmp.str() + "/det.ckpt", metrics);
    DetectorModel loaded = DetectorModel::load(tmp.str() + "/det.ckpt");
    CHECK(loaded.param_hash == model.param_hash);

    DetectorPretrainConfig hard = train;
    hard.max_steps = 3;
    hard.accuracy_bar = 1.01;
    CHECK_THROWS_WITH_AS(pretrain_detector(scenes, gen.categories, cfg, hard),
                         "detector underfit", std::runtime_error);
}
