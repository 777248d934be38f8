#pragma once

// Training, evaluation and the fusion ablation. Everything here is
// deterministic for a fixed RunConfig: data, splits, batch schedule and
// initialisation all come from seeds derived from RunConfig::seed.

#include <algorithm>
#include <cstdio>
#include <functional>
#include <map>
#include <numeric>

#include "hftrans/checkpoint.hpp"
#include "hftrans/complexity.hpp"
#include "hftrans/config.hpp"
#include "hftrans/kfold.hpp"
#include "hftrans/losses.hpp"
#include "hftrans/metrics.hpp"
#include "hftrans/optim.hpp"
#include "hftrans/phantom.hpp"
#include "hftrans/preprocess.hpp"
#include "hftrans/volume_io.hpp"

namespace hft {

class TrainingError : public std::runtime_error {
public:
    TrainingError(std::size_t step, const std::string& what)
        : std::runtime_error("training diverged at step " + std::to_string(step) + ": " + what), step_(step) {}
    std::size_t step() const noexcept { return step_; }

private:
    std::size_t step_;
};

/// Preprocessed samples. Volumes are padded to multiples of 16; `original`
/// holds the extents to crop predictions back to.
struct Dataset {
    std::vector<std::string> ids;
    std::vector<VolumeSample> samples;
    std::vector<Extents> original;

    std::size_t size() const { return samples.size(); }
};

inline void add_to_dataset(Dataset& d, std::string id, const VolumeSample& raw, bool zscore) {
    auto [padded, original] = pad_to_multiple(zscore ? zscore_normalize(raw) : raw, 16);
    d.ids.push_back(std::move(id));
    d.samples.push_back(std::move(padded));
    d.original.push_back(original);
}

inline std::string sample_id(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "sample%03zu", i);
    return buf;
}

inline Dataset load_dataset(const RunConfig& cfg) {
    Dataset d;
    if (cfg.manifest.empty()) {
        const auto raw = generate_phantoms(cfg.phantom, cfg.phantoms);
        for (std::size_t i = 0; i < raw.size(); ++i) add_to_dataset(d, sample_id(i), raw[i], cfg.zscore);
    } else {
        for (const auto& e : read_manifest(cfg.manifest))
            add_to_dataset(d, e.id, read_volume(e.intensities, e.labels), cfg.zscore);
        if (d.size() == 0) throw std::invalid_argument("manifest " + cfg.manifest.string() + " lists no samples");
    }
    return d;
}

/// Throws unless every sample fits `model` (modality count, padded extents).
inline void check_dataset(const Dataset& d, const ModelConfig& model) {
    for (std::size_t i = 0; i < d.size(); ++i) {
        const auto& s = d.samples[i];
        if (s.modality_count() != model.modalities)
            throw std::invalid_argument(d.ids[i] + ": " + std::to_string(s.modality_count()) +
                                        " modalities, model expects " + std::to_string(model.modalities));
        if (s.extents() != model.extents)
            throw std::invalid_argument(d.ids[i] + ": padded extents " +
                                        shape_str(Shape(s.extents().begin(), s.extents().end())) +
                                        " differ from model extents " +
                                        shape_str(Shape(model.extents.begin(), model.extents.end())));
        for (auto l : s.labels.labels)
            if (l >= model.num_classes)
                throw std::invalid_argument(d.ids[i] + ": label " + std::to_string(l) + " outside " +
                                            std::to_string(model.num_classes) + " classes");
    }
}

// ---------------------------------------------------------------------------
// Training

struct TrainSettings {
    AdamSettings optimizer;
    std::size_t steps = 0;
    std::size_t batch_size = 1;
    std::uint64_t schedule_seed = 0;
};

/// Sample indices visited by each step, flattened (steps × batch). Epochs are
/// seeded permutations of `indices`.
inline std::vector<std::size_t> batch_schedule(const std::vector<std::size_t>& indices, std::size_t steps,
                                               std::size_t batch, std::uint64_t seed) {
    if (indices.empty()) throw std::invalid_argument("batch_schedule: no training samples");
    std::vector<std::size_t> out;
    out.reserve(steps * batch);
    Rng rng(seed);
    std::vector<std::size_t> epoch;
    while (out.size() < steps * batch) {
        epoch = indices;
        for (std::size_t i = epoch.size(); i-- > 1;) std::swap(epoch[i], epoch[rng.below(i + 1)]);
        for (auto i : epoch) {
            if (out.size() == steps * batch) break;
            out.push_back(i);
        }
    }
    return out;
}

inline std::uint64_t hash_indices(const std::vector<std::size_t>& v, std::uint64_t h = fnv1a("")) {
    for (auto i : v) h = fnv1a(std::to_string(i) + ",", h);
    return h;
}

/// Loss on one sample and its parameter gradients, in for_each order.
template <class T>
T loss_and_gradients(const Model<T>& model, const VolumeSample& sample, std::vector<Tensor<T>>& grads) {
    Tape<T> tape;
    ModelParams<T> bound;
    const Tensor<T> inputs = sample.modalities.template cast<T>();
    const auto loss = combined_loss(model.forward(inputs, tape, bound), sample.labels);
    const auto g = tape.backward(loss);
    grads.clear();
    bound.for_each([&](const std::string&, const Tensor<T>& t) { grads.push_back(g.of(t)); });
    return loss.item();
}

template <class T>
T evaluate_loss(const Model<T>& model, const VolumeSample& sample) {
    return combined_loss(model.forward(sample.modalities.template cast<T>()), sample.labels).item();
}

/// Adam on the mean batch loss. Returns the loss of every step, measured
/// before that step's update. `on_step(step, loss)` is called after each.
template <class T>
std::vector<double> train_model(Model<T>& model, const Dataset& data, const std::vector<std::size_t>& indices,
                                const TrainSettings& settings,
                                const std::function<void(std::size_t, double)>& on_step = {}) {
    check_dataset(data, model.config());
    std::vector<double> losses;
    if (settings.steps == 0) return losses;
    if (settings.batch_size == 0) throw std::invalid_argument("train_model: batch_size must be positive");
    const auto schedule = batch_schedule(indices, settings.steps, settings.batch_size, settings.schedule_seed);

    std::vector<Tensor<T>> params;
    model.params().for_each([&](const std::string&, Tensor<T>& t) { params.push_back(t); });
    AdamState state;
    std::vector<Tensor<T>> sum, grads;
    for (std::size_t step = 0; step < settings.steps; ++step) {
        double loss = 0.0;
        try {
            for (std::size_t b = 0; b < settings.batch_size; ++b) {
                const auto& sample = data.samples[schedule[step * settings.batch_size + b]];
                loss += static_cast<double>(loss_and_gradients(model, sample, grads));
                if (b == 0) {
                    sum = std::move(grads);
                    grads = {};
                    for (auto& s : sum) s = s.clone();
                } else {
                    for (std::size_t i = 0; i < sum.size(); ++i) {
                        auto dst = sum[i].mutable_values();
                        auto src = grads[i].values();
                        for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
                    }
                }
            }
        } catch (const NumericError& e) {
            throw TrainingError(step, e.what());
        }
        loss /= static_cast<double>(settings.batch_size);
        if (!std::isfinite(loss)) throw TrainingError(step, "non-finite loss");
        const T inv = T(1) / static_cast<T>(settings.batch_size);
        for (auto& s : sum)
            for (auto& v : s.mutable_values()) v *= inv;
        adam_step<T>(params, sum, state, settings.optimizer);
        for (const auto& p : params)
            for (auto v : p.values())
                if (!std::isfinite(v)) throw TrainingError(step, "non-finite parameter after update");
        losses.push_back(loss);
        if (on_step) on_step(step, loss);
    }
    return losses;
}

inline void write_loss_csv(std::ostream& os, const std::vector<double>& losses) {
    os << "step,loss\n";
    for (std::size_t i = 0; i < losses.size(); ++i) os << i << ',' << format_fixed(losses[i]) << '\n';
}

// ---------------------------------------------------------------------------
// Evaluation

/// Arg-max class per voxel (lowest class wins ties).
template <class T>
LabelVolume predict_labels(const Model<T>& model, const VolumeSample& sample) {
    const auto probs = model.forward(sample.modalities.template cast<T>());
    const std::size_t nc = probs.extent(0);
    const std::size_t V = voxel_count(sample.extents());
    auto p = probs.values();
    LabelVolume out{sample.extents(), sample.spacing(), std::vector<std::uint8_t>(V, 0)};
    for (std::size_t v = 0; v < V; ++v) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < nc; ++c)
            if (p[c * V + v] > p[best * V + v]) best = c;
        out.labels[v] = static_cast<std::uint8_t>(best);
    }
    return out;
}

struct EvalRow {
    std::string mode;
    std::size_t fold = 0;
    std::string sample;
    MetricsRow metrics;
};

/// Metrics of `model` on the given samples, computed on the original
/// (unpadded) extents.
template <class T>
std::vector<EvalRow> evaluate(const Model<T>& model, const Dataset& data, const std::vector<std::size_t>& indices,
                              const RegionSpec& regions, const std::string& mode = "", std::size_t fold = 0) {
    check_dataset(data, model.config());
    std::vector<EvalRow> rows;
    for (auto i : indices) {
        const auto pred = crop_labels(predict_labels(model, data.samples[i]), data.original[i]);
        const auto gt = crop_labels(data.samples[i].labels, data.original[i]);
        for (const auto& m : compute_metrics(pred, gt, regions, model.config().num_classes))
            rows.push_back({mode, fold, data.ids[i], m});
    }
    return rows;
}

/// Per-region arithmetic mean over rows, in region order.
inline std::vector<MetricsRow> mean_by_region(const std::vector<EvalRow>& rows, const RegionSpec& regions) {
    std::vector<MetricsRow> out;
    for (const auto& r : regions) {
        MetricsRow m{r.name, 0.0, 0.0, 0.0};
        std::size_t n = 0;
        for (const auto& row : rows)
            if (row.metrics.region == r.name) {
                m.dice += row.metrics.dice;
                m.hd95 += row.metrics.hd95;
                m.volume_similarity += row.metrics.volume_similarity;
                ++n;
            }
        if (n) {
            m.dice /= static_cast<double>(n);
            m.hd95 /= static_cast<double>(n);
            m.volume_similarity /= static_cast<double>(n);
        }
        out.push_back(m);
    }
    return out;
}

inline MetricsRow overall_mean(const std::vector<MetricsRow>& per_region) {
    MetricsRow m{"mean", 0.0, 0.0, 0.0};
    for (const auto& r : per_region) {
        m.dice += r.dice;
        m.hd95 += r.hd95;
        m.volume_similarity += r.volume_similarity;
    }
    if (!per_region.empty()) {
        const auto n = static_cast<double>(per_region.size());
        m.dice /= n;
        m.hd95 /= n;
        m.volume_similarity /= n;
    }
    return m;
}

inline void write_eval_rows_csv(std::ostream& os, const std::vector<EvalRow>& rows, bool with_mode) {
    os << (with_mode ? "mode,fold,sample,region,dice,hd95_mm,volume_similarity\n"
                     : "sample,region,dice,hd95_mm,volume_similarity\n");
    for (const auto& r : rows) {
        if (with_mode) os << r.mode << ',' << r.fold << ',';
        os << r.sample << ',' << r.metrics.region << ',' << format_fixed(r.metrics.dice) << ','
           << format_fixed(r.metrics.hd95) << ',' << format_fixed(r.metrics.volume_similarity) << '\n';
    }
}

// ---------------------------------------------------------------------------
// Commands

inline std::ofstream open_output(const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    return os;
}

/// Writes the configured phantoms as volume files plus out/manifest.txt.
inline std::filesystem::path run_gen_data(const RunConfig& cfg) {
    const auto dir = cfg.out / "data";
    std::filesystem::create_directories(dir);
    std::vector<ManifestEntry> entries;
    const auto raw = generate_phantoms(cfg.phantom, cfg.phantoms);
    for (std::size_t i = 0; i < raw.size(); ++i) {
        const auto id = sample_id(i);
        ManifestEntry e{id, std::filesystem::path("data") / (id + "_intensities.hftv"),
                        std::filesystem::path("data") / (id + "_labels.hftv")};
        write_volume(raw[i], cfg.out / e.intensities, cfg.out / e.labels);
        entries.push_back(e);
    }
    const auto manifest = cfg.out / "manifest.txt";
    write_manifest(entries, manifest);
    return manifest;
}

struct TrainOutcome {
    Model<float> model;
    std::vector<double> losses;
};

/// Trains cfg.model on every sample; writes out/checkpoint.hftc and
/// out/loss.csv.
inline TrainOutcome run_train(const RunConfig& cfg, const std::function<void(std::size_t, double)>& on_step = {}) {
    const auto data = load_dataset(cfg);
    Model<float> model(cfg.model);
    std::vector<std::size_t> all(data.size());
    std::iota(all.begin(), all.end(), 0);
    TrainSettings ts{cfg.optimizer, cfg.steps, cfg.batch_size, derive_seed(cfg.seed, "schedule")};
    auto losses = train_model(model, data, all, ts, on_step);
    std::filesystem::create_directories(cfg.out);
    write_checkpoint(model, cfg.out / "checkpoint.hftc");
    auto os = open_output(cfg.out / "loss.csv");
    write_loss_csv(os, losses);
    return {std::move(model), std::move(losses)};
}

/// Evaluates a checkpoint on the configured data; writes out/metrics.csv
/// (per-region means) and out/metrics_per_sample.csv.
inline std::vector<MetricsRow> run_eval(const RunConfig& cfg, const std::filesystem::path& checkpoint) {
    const auto model = read_checkpoint<float>(checkpoint);
    const auto data = load_dataset(cfg);
    std::vector<std::size_t> all(data.size());
    std::iota(all.begin(), all.end(), 0);
    const auto regions = cfg.effective_regions();
    const auto rows = evaluate(model, data, all, regions);
    const auto means = mean_by_region(rows, regions);
    auto os = open_output(cfg.out / "metrics.csv");
    write_metrics_csv(os, means);
    auto ps = open_output(cfg.out / "metrics_per_sample.csv");
    write_eval_rows_csv(ps, rows, false);
    return means;
}

/// Published whole-tumour-style reference figures for the four standard
/// arms (Dice %, HD95 mm), reported next to the toy results.
inline std::pair<std::string, std::string> reference_figures(FusionMode mode) {
    switch (mode) {
        case FusionMode::early: return {"83.06", "25.56"};
        case FusionMode::middle: return {"82.40", "28.01"};
        case FusionMode::hybrid: return {"83.52", "24.07"};
        case FusionMode::hybrid_star: return {"83.28", "22.63"};
        default: return {"", ""};
    }
}

struct AblationArm {
    FusionMode mode{};
    std::size_t encoders = 0;
    std::string composition;
    std::size_t parameters = 0;
    std::uint64_t macs = 0;
    MetricsRow mean;                  // over regions, folds and samples
    std::vector<MetricsRow> regions;  // per region, over folds and samples
    std::uint64_t split_hash = 0;
    std::uint64_t schedule_hash = 0;
};

struct AblationResult {
    std::vector<AblationArm> arms;
    std::vector<EvalRow> rows;
};

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

/// k-fold comparison of fusion modes. Every arm sees the same folds and the
/// same per-fold batch schedule; only the encoder layout and the
/// (mode, fold)-derived initialisation seed differ.
inline AblationResult run_ablation(const RunConfig& cfg,
                                   const std::function<void(const std::string&)>& progress = {}) {
    const auto data = load_dataset(cfg);
    const auto folds = kfold_split(data.size(), cfg.folds, derive_seed(cfg.seed, "split"));
    std::uint64_t split_hash = fnv1a("");
    for (const auto& f : folds) split_hash = hash_indices(f.validation, fnv1a("|", split_hash));
    const auto regions = cfg.effective_regions();

    AblationResult result;
    for (auto mode : cfg.modes) {
        ModelConfig mc = cfg.model;
        mc.fusion = mode;
        mc.validate();
        AblationArm arm;
        arm.mode = mode;
        arm.encoders = mc.fusion_spec().encoder_count();
        arm.composition = describe(mc.fusion_spec());
        arm.macs = estimate_flops(mc);
        arm.split_hash = split_hash;
        arm.schedule_hash = fnv1a("");
        std::vector<EvalRow> arm_rows;
        for (std::size_t f = 0; f < folds.size(); ++f) {
            mc.seed = derive_seed(cfg.seed, std::string(to_string(mode)) + "/fold" + std::to_string(f));
            Model<float> model(mc);
            arm.parameters = count_parameters(model.params());
            TrainSettings ts{cfg.optimizer, cfg.steps, cfg.batch_size,
                             derive_seed(cfg.seed, "schedule" + std::to_string(f))};
            arm.schedule_hash = hash_indices(batch_schedule(folds[f].train, ts.steps == 0 ? 1 : ts.steps,
                                                            ts.batch_size, ts.schedule_seed),
                                             arm.schedule_hash);
            train_model(model, data, folds[f].train, ts);
            auto rows = evaluate(model, data, folds[f].validation, regions, std::string(to_string(mode)), f);
            if (progress) {
                const auto m = overall_mean(mean_by_region(rows, regions));
                progress(std::string(to_string(mode)) + " fold " + std::to_string(f) +
                         ": dice=" + format_fixed(m.dice, 4) + " hd95=" + format_fixed(m.hd95, 3));
            }
            arm_rows.insert(arm_rows.end(), rows.begin(), rows.end());
        }
        arm.regions = mean_by_region(arm_rows, regions);
        arm.mean = overall_mean(arm.regions);
        result.rows.insert(result.rows.end(), arm_rows.begin(), arm_rows.end());
        result.arms.push_back(arm);
    }
    return result;
}

inline void write_ablation_csv(std::ostream& os, const AblationResult& r) {
    os << "mode,encoders,composition,parameters,macs,dice,hd95_mm,volume_similarity,"
          "reference_dice_pct,reference_hd95_mm,split_hash,schedule_hash\n";
    for (const auto& a : r.arms) {
        const auto [ref_dice, ref_hd] = reference_figures(a.mode);
        os << to_string(a.mode) << ',' << a.encoders << ',' << a.composition << ',' << a.parameters << ','
           << a.macs << ',' << format_fixed(a.mean.dice) << ',' << format_fixed(a.mean.hd95) << ','
           << format_fixed(a.mean.volume_similarity) << ',' << ref_dice << ',' << ref_hd << ','
           << hex64(a.split_hash) << ',' << hex64(a.schedule_hash) << '\n';
    }
}

/// Writes out/ablation.csv and out/ablation_folds.csv.
inline void write_ablation(const RunConfig& cfg, const AblationResult& r) {
    auto os = open_output(cfg.out / "ablation.csv");
    write_ablation_csv(os, r);
    auto fs = open_output(cfg.out / "ablation_folds.csv");
    write_eval_rows_csv(fs, r.rows, true);
}

}  // namespace hft
