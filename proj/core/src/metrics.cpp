#include "diffaug/metrics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <sstream>

#include <nlohmann/json.hpp>

using json = nlohmann::json;

namespace diffaug {

json MetricReport::to_json() const {
    json j = {{"fid_proxy", fid_proxy},
              {"ds", ds},
              {"iqs", iqs},
              {"iqs50", iqs50},
              {"n_images", n_images},
              {"thresholds", thresholds},
              {"iqs_formula_version", iqs_formula_version}};
    if (channel_std_first >= 0.0) j["channel_std_first"] = channel_std_first;
    if (channel_std_recurrent >= 0.0) j["channel_std_recurrent"] = channel_std_recurrent;
    return j;
}

std::string MetricReport::csv_header() {
    return "fid_proxy,ds,iqs,iqs50,channel_std_first,channel_std_recurrent,n_images";
}

std::string MetricReport::csv_row() const {
    std::ostringstream os;
    os.precision(17);
    os << fid_proxy << "," << ds << "," << iqs << "," << iqs50 << ","
       << channel_std_first << "," << channel_std_recurrent << "," << n_images;
    return os.str();
}

std::vector<double> default_iqs_thresholds() {
    std::vector<double> t;
    for (int i = 1; i <= 9; ++i) t.push_back(i / 10.0);
    return t;
}

std::pair<double, double> iqs_with_counter(const std::vector<Image>& generated,
                                           const std::vector<Scene>& references,
                                           const std::vector<Category>& categories,
                                           const CountFn& counter,
                                           const std::vector<double>& thresholds) {
    if (generated.size() != references.size())
        throw std::invalid_argument("iqs: generated/reference length mismatch");
    if (generated.empty()) throw std::invalid_argument("iqs: empty sets");

    // prompts and ground-truth counts per reference
    std::vector<PromptSpec> prompts;
    prompts.reserve(references.size());
    for (const auto& ref : references)
        prompts.push_back(build_prompt(count_by_category(ref.annotations, categories)));

    double sum = 0.0, sum50 = 0.0;
    int64_t n = 0, n50 = 0;
    for (double theta : thresholds) {
        bool is50 = std::abs(theta - 0.5) < 1e-12;
        for (size_t i = 0; i < generated.size(); ++i) {
            std::vector<int> det_counts = counter(generated[i], prompts[i], theta);
            for (size_t j = 0; j < prompts[i].counts.size(); ++j) {
                int gt = prompts[i].counts[j];
                double r = std::min(det_counts[j], gt) / static_cast<double>(gt);
                sum += r;
                ++n;
                if (is50) {
                    sum50 += r;
                    ++n50;
                }
            }
        }
    }
    double iqs_all = 100.0 * sum / n;
    double iqs_50 = n50 > 0 ? 100.0 * sum50 / n50 : 0.0;
    return {iqs_all, iqs_50};
}

std::pair<double, double> iqs(const std::vector<Image>& generated,
                              const std::vector<Scene>& references,
                              const std::vector<Category>& categories, GridDetector& det,
                              const std::vector<double>& thresholds) {
    bool has50 = false;
    for (double t : thresholds) has50 = has50 || std::abs(t - 0.5) < 1e-12;
    auto counter = [&](const Image& img, const PromptSpec& prompt, double theta) {
        return count_detections(img, prompt, det, theta);
    };
    auto [all, at50] = iqs_with_counter(generated, references, categories, counter,
                                        thresholds);
    if (!has50) {
        auto [only50, same] = iqs_with_counter(generated, references, categories, counter,
                                               {0.5});
        at50 = same;
        (void)only50;
    }
    return {all, at50};
}

// ---- Frechet ----

double fid_from_features(const std::vector<std::vector<float>>& a,
                         const std::vector<std::vector<float>>& b) {
    if (a.empty() || b.empty()) throw std::invalid_argument("fid: empty feature set");
    const int d = static_cast<int>(a[0].size());
    // explicit loops keep the accumulation order fixed regardless of how the
    // backing buffers happen to be aligned
    auto fit = [&](const std::vector<std::vector<float>>& x, Eigen::VectorXd& mu,
                   Eigen::MatrixXd& cov) {
        const int n = static_cast<int>(x.size());
        mu = Eigen::VectorXd::Zero(d);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j) mu(j) += x[i][j];
        mu /= n;
        cov = Eigen::MatrixXd::Zero(d, d);
        for (int i = 0; i < n; ++i)
            for (int p = 0; p < d; ++p) {
                double cp = x[i][p] - mu(p);
                for (int q = 0; q < d; ++q) cov(p, q) += cp * (x[i][q] - mu(q));
            }
        cov /= std::max(1, n - 1);
        if (n < d + 1) {
            // shrink toward a scaled identity for rank-deficient fits
            double tr = 0.0;
            for (int p = 0; p < d; ++p) tr += cov(p, p);
            double ridge = 1e-3 * tr / d + 1e-10;
            for (int p = 0; p < d; ++p) cov(p, p) += ridge;
        }
    };
    Eigen::VectorXd mu_a, mu_b;
    Eigen::MatrixXd cov_a, cov_b;
    fit(a, mu_a, cov_a);
    fit(b, mu_b, cov_b);

    auto sqrtm = [&](const Eigen::MatrixXd& m) {
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
        Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
        return Eigen::MatrixXd(es.eigenvectors() * ev.asDiagonal() *
                               es.eigenvectors().transpose());
    };
    Eigen::MatrixXd sa = sqrtm(cov_a);
    Eigen::MatrixXd inner = sa * cov_b * sa;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (inner + inner.transpose()));
    double tr_sqrt = 0.0;
    for (int p = 0; p < d; ++p) tr_sqrt += std::sqrt(std::max(0.0, es.eigenvalues()(p)));

    double mean_term = 0.0, tr_a = 0.0, tr_b = 0.0;
    for (int p = 0; p < d; ++p) {
        double dm = mu_a(p) - mu_b(p);
        mean_term += dm * dm;
        tr_a += cov_a(p, p);
        tr_b += cov_b(p, p);
    }
    double fid = mean_term + tr_a + tr_b - 2.0 * tr_sqrt;
    return std::max(0.0, fid);
}

double fid_proxy(const std::vector<Image>& a, const std::vector<Image>& b,
                 SceneEncoder& enc) {
    return fid_from_features(enc.summaries_of(a), enc.summaries_of(b));
}

// ---- diversity ----

namespace {

// Normalize each spatial position's channel vector to unit length.
void unit_normalize_channels(std::vector<float>& data, int c, int hw) {
    for (int i = 0; i < hw; ++i) {
        double ss = 0.0;
        for (int ch = 0; ch < c; ++ch) {
            double v = data[static_cast<size_t>(ch) * hw + i];
            ss += v * v;
        }
        float inv = static_cast<float>(1.0 / std::sqrt(ss + 1e-10));
        for (int ch = 0; ch < c; ++ch) data[static_cast<size_t>(ch) * hw + i] *= inv;
    }
}

}  // namespace

double diversity_score(const std::vector<std::pair<Image, Image>>& pairs,
                       SceneEncoder& enc) {
    if (pairs.empty()) throw std::invalid_argument("diversity_score: empty pairs");
    double total = 0.0;
    for (const auto& [orig, aug] : pairs) {
        auto fa = enc.block_features(orig);
        auto fb = enc.block_features(aug);
        if (fa.size() != fb.size())
            throw std::invalid_argument("diversity_score: feature block mismatch");
        double pair_sum = 0.0;
        for (size_t k = 0; k < fa.size(); ++k) {
            auto& [da, va] = fa[k];
            auto& [db, vb] = fb[k];
            if (da != db) throw std::invalid_argument("diversity_score: shape mismatch");
            int c = da[1], hw = da[2] * da[3];
            unit_normalize_channels(va, c, hw);
            unit_normalize_channels(vb, c, hw);
            double ss = 0.0;
            for (size_t i = 0; i < va.size(); ++i) {
                double dd = static_cast<double>(va[i]) - vb[i];
                ss += dd * dd;
            }
            pair_sum += ss / hw;  // mean over positions of squared channel distance
        }
        total += pair_sum / fa.size();  // equal block weights
    }
    return total / pairs.size();
}

double channel_std(const std::vector<Image>& images) {
    if (images.size() < 2) throw std::invalid_argument("channel_std: batch must be >= 2");
    int n = static_cast<int>(images.size());
    double result = 0.0;
    for (int c = 0; c < 3; ++c) {
        std::vector<double> means(n);
        for (int i = 0; i < n; ++i) {
            const Image& img = images[i];
            double s = 0.0;
            for (int y = 0; y < img.height; ++y)
                for (int x = 0; x < img.width; ++x) s += img.at(y, x, c);
            means[i] = s / (static_cast<double>(img.height) * img.width);
        }
        double mu = 0.0;
        for (double m : means) mu += m;
        mu /= n;
        double var = 0.0;
        for (double m : means) var += (m - mu) * (m - mu);
        var /= n;  // population convention
        result += std::sqrt(var);
    }
    return result / 3.0;
}

// ---- recurrent generation ----

std::vector<Image> GenTree::level_images(int depth) const {
    std::vector<Image> out;
    for (const auto& n : nodes)
        if (n.depth == depth) out.push_back(n.image);
    return out;
}

GenTree recurrent_generate(DiffusionModel& model, const ConditionBuilder& builder,
                           const Scene& condition, const RecurrentConfig& cfg,
                           uint64_t seed) {
    if (cfg.depth < 1 || cfg.fanout < 1)
        throw std::invalid_argument("recurrent_generate: depth and fanout must be >= 1");
    GenTree tree;
    GenTreeNode root;
    root.image = condition.image;
    root.depth = 0;
    root.seed = seed;
    tree.nodes.push_back(root);

    std::vector<int> frontier{0};
    for (int level = 1; level <= cfg.depth; ++level) {
        std::vector<int> next;
        for (int parent : frontier) {
            // resolve the parent's condition; generated parents use detector boxes
            TokenSeq cond;
            bool ok = true;
            uint64_t cond_seed = derive_seed(seed, static_cast<uint64_t>(parent) * 2 + 1);
            Rng crng(cond_seed);
            try {
                if (level == 1) {
                    cond = builder.build(condition, cfg.mode, cfg.first_level_boxes, crng);
                } else {
                    std::vector<Box> boxes =
                        builder.resolve_boxes(tree.nodes[parent].image, {},
                                              BoxSource::Detector, crng);
                    if (boxes.empty()) ok = false;
                    else
                        cond = builder.build_from_image(tree.nodes[parent].image, cfg.mode,
                                                        BoxSource::Detector, crng);
                }
            } catch (const std::invalid_argument&) {
                ok = false;
            }
            if (!ok) {
                tree.nodes[parent].degenerate = true;
                continue;
            }
            for (int f = 0; f < cfg.fanout; ++f) {
                uint64_t node_seed =
                    derive_seed(seed, (static_cast<uint64_t>(parent) << 16) + f + 1);
                std::vector<Image> imgs =
                    sample_images(model, {cond}, cfg.sampler, node_seed);
                GenTreeNode node;
                node.image = std::move(imgs[0]);
                node.depth = level;
                node.parent = parent;
                node.seed = node_seed;
                tree.nodes.push_back(std::move(node));
                next.push_back(static_cast<int>(tree.nodes.size()) - 1);
            }
        }
        frontier = std::move(next);
        if (frontier.empty()) break;
    }
    return tree;
}

}  // namespace diffaug
