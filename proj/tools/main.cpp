// Command-line front end: synthetic data generation, training, evaluation,
// preset ablation, gradient checking, the scan/conv equivalence sweep and
// the sequence-length scaling benchmark.

#include <CLI11.hpp>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "mvssm/bench.hpp"
#include "mvssm/data.hpp"
#include "mvssm/model.hpp"
#include "mvssm/train.hpp"
#include "mvssm/verify.hpp"

using namespace mvssm;

namespace {

std::string metrics_json(const Metrics& m) {
    std::string s = "{\"accuracy\": " + detail::json_number(m.accuracy);
    s += ", \"auc\": " + (m.auc_defined ? detail::json_number(m.auc) : std::string("null"));
    s += ", \"f1\": " + detail::json_number(m.f1);
    s += ", \"sensitivity\": " + detail::json_number(m.sensitivity);
    s += ", \"specificity\": " + detail::json_number(m.specificity);
    s += ", \"tp\": " + std::to_string(m.tp) + ", \"fp\": " + std::to_string(m.fp);
    s += ", \"tn\": " + std::to_string(m.tn) + ", \"fn\": " + std::to_string(m.fn) + "}";
    return s;
}

struct SharedConfig {
    ModelConfig model;
    TrainConfig train;
};

SharedConfig read_config(const std::string& path, const std::string& preset) {
    KvConfig kv = path.empty() ? KvConfig() : KvConfig::parse_file(path);
    SharedConfig out;
    out.model = ModelConfig::from_kv(kv);
    out.train = TrainConfig::from_kv(kv);
    kv.reject_unknown();
    if (!preset.empty()) out.model.preset = preset_from_letter(preset);
    out.train.validate();
    return out;
}

std::vector<Sample> dataset_for(const std::string& manifest, std::size_t image_size,
                                std::size_t gen_n, std::size_t gen_size, std::uint64_t gen_seed,
                                double gen_difficulty) {
    if (!manifest.empty()) return load_manifest(manifest, image_size);
    std::cout << "no manifest given; generating " << gen_n << " synthetic samples (size "
              << gen_size << ", seed " << gen_seed << ", difficulty " << gen_difficulty << ")\n";
    return generate_dataset(gen_n, gen_size, gen_seed, gen_difficulty);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dual-stream selective state-space classifier"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "write a synthetic multi-view dataset");
    std::size_t gn = 100, gsize = 64;
    std::uint64_t gseed = 0;
    double gdiff = 0.0;
    std::string gout = "data";
    std::string gformat = "pgm";
    gen->add_option("--n", gn, "number of samples");
    gen->add_option("--size", gsize, "image side in pixels");
    gen->add_option("--seed", gseed, "generator seed");
    gen->add_option("--difficulty", gdiff, "0 = max class separation");
    gen->add_option("--out", gout, "output directory")->required();
    gen->add_option("--format", gformat, "pgm or png")->check(CLI::IsMember({"pgm", "png"}));

    // train
    auto* tr = app.add_subcommand("train", "train a preset on a manifest dataset");
    std::string t_preset = "d", t_manifest, t_config, t_out = "run";
    tr->add_option("--preset", t_preset, "a, b, c or d")
        ->check(CLI::IsMember({"a", "b", "c", "d"}));
    tr->add_option("--manifest", t_manifest, "manifest csv path")->required();
    tr->add_option("--config", t_config, "key = value config file");
    tr->add_option("--out", t_out, "run output directory");

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a manifest dataset");
    std::string e_ckpt, e_manifest;
    ev->add_option("--checkpoint", e_ckpt)->required();
    ev->add_option("--manifest", e_manifest)->required();

    // ablate
    auto* ab = app.add_subcommand("ablate", "train several presets and tabulate metrics");
    std::string a_presets = "d,a", a_manifest, a_config, a_out;
    std::size_t a_seeds = 5;
    std::size_t a_gen_n = 120, a_gen_size = 32;
    std::uint64_t a_gen_seed = 7;
    double a_gen_diff = 1.0;
    ab->add_option("--presets", a_presets, "comma-separated preset letters");
    ab->add_option("--seeds", a_seeds, "runs per preset");
    ab->add_option("--manifest", a_manifest, "manifest csv (otherwise synthetic data)");
    ab->add_option("--config", a_config, "key = value config file");
    ab->add_option("--out", a_out, "write the table to this file as well");
    ab->add_option("--gen-n", a_gen_n, "synthetic sample count");
    ab->add_option("--gen-size", a_gen_size, "synthetic image side");
    ab->add_option("--gen-seed", a_gen_seed, "synthetic generator seed");
    ab->add_option("--gen-difficulty", a_gen_diff, "synthetic difficulty");

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    std::string gc_module = "all";
    gc->add_option("--module", gc_module, "tensor, ssm, blocks, seqmoe, model or all")
        ->check(CLI::IsMember({"all", "tensor", "ssm", "blocks", "seqmoe", "model"}));

    // equiv
    auto* eq = app.add_subcommand("equiv", "scan vs convolution equivalence sweep");
    int eq_trials = 200;
    eq->add_option("--trials", eq_trials, "number of random systems");

    // bench
    auto* be = app.add_subcommand("bench", "sequence-length scaling of block forwards");
    std::string be_lengths = "256,512,1024,2048,4096";
    std::size_t be_dim = 64;
    int be_reps = 5;
    std::string be_out;
    be->add_option("--lengths", be_lengths, "comma-separated ascending lengths");
    be->add_option("--dim", be_dim, "embedding width");
    be->add_option("--reps", be_reps, "repetitions per point (median)");
    be->add_option("--out", be_out, "write the csv here as well");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) {
            auto samples = generate_dataset(gn, gsize, gseed, gdiff);
            const std::string manifest = write_dataset(
                samples, gout, gformat == "png" ? ImageFormat::Png : ImageFormat::Pgm);
            std::cout << "wrote " << samples.size() << " samples to " << gout << "\n"
                      << "manifest: " << manifest << "\n";
        }

        if (*tr) {
            SharedConfig cfg = read_config(t_config, t_preset);
            auto samples = load_manifest(t_manifest, cfg.model.image_size);
            auto split =
                split_by_breast(samples, SplitSpec{cfg.train.train_fraction, cfg.train.seed});
            auto model = build_model<float>(cfg.model, cfg.train.seed);
            std::cout << "preset " << preset_letter(cfg.model.preset) << ": "
                      << model.parameter_count() << " parameters ("
                      << model.trainable_parameter_count() << " trainable), "
                      << split.train.size() << " train / " << split.test.size()
                      << " test samples\n";
            auto res = train(model, samples, split, cfg.train, t_out);
            std::cout << "epochs run: " << res.epochs_run << "\n"
                      << "run log:    " << res.run_log_path << "\n"
                      << "checkpoint: " << res.checkpoint_path << "\n"
                      << "final test metrics: " << metrics_json(res.epochs.back().metrics)
                      << "\n";
        }

        if (*ev) {
            auto model = load_checkpoint<float>(e_ckpt);
            auto samples = load_manifest(e_manifest, model.config.image_size);
            std::vector<std::size_t> all(samples.size());
            for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
            std::cout << metrics_json(evaluate(model, samples, all)) << "\n";
        }

        if (*ab) {
            SharedConfig cfg = read_config(a_config, "");
            if (a_manifest.empty() && !a_config.empty() && cfg.model.image_size > a_gen_size)
                a_gen_size = cfg.model.image_size;
            if (a_manifest.empty()) cfg.model.image_size = a_gen_size;
            auto samples = dataset_for(a_manifest, cfg.model.image_size, a_gen_n, a_gen_size,
                                       a_gen_seed, a_gen_diff);
            auto split =
                split_by_breast(samples, SplitSpec{cfg.train.train_fraction, cfg.train.seed});
            std::vector<AblationRow> rows;
            bool has_full = false;
            std::stringstream presets(a_presets);
            std::string letter;
            while (std::getline(presets, letter, ',')) {
                const Preset p = preset_from_letter(letter);
                if (p == Preset::Full) has_full = true;
                std::cout << "ablate: training preset " << letter << " x" << a_seeds
                          << " seeds...\n";
                rows.push_back(ablate_one<float>(p, cfg.model, samples, split, cfg.train,
                                                 a_seeds, a_out.empty() ? "ablation" : a_out + ".runs"));
            }
            const std::string table = ablation_table(rows, has_full);
            std::cout << table;
            if (!a_out.empty()) {
                std::ofstream f(a_out, std::ios::binary);
                f << table;
                std::cout << "table written to " << a_out << "\n";
            }
        }

        if (*gc) {
            auto results = gradcheck_battery(gc_module);
            bool all_pass = true;
            for (const auto& r : results) {
                std::printf("%-24s max_rel_err %.3e  %s\n", r.name.c_str(), r.max_rel_err,
                            r.pass ? "PASS" : "FAIL");
                all_pass = all_pass && r.pass;
            }
            std::printf("gradcheck: %zu checks, %s\n", results.size(),
                        all_pass ? "all passed" : "FAILURES");
            return all_pass ? 0 : 1;
        }

        if (*eq) {
            auto rep = equivalence_suite(eq_trials);
            const bool pass = rep.max_abs_diff < 1e-10;
            std::printf("equivalence: %d trials, max |conv - scan| = %.3e in %.2f s  %s\n",
                        rep.trials, rep.max_abs_diff, rep.seconds, pass ? "PASS" : "FAIL");
            return pass ? 0 : 1;
        }

        if (*be) {
            std::vector<std::size_t> lengths;
            std::stringstream ss(be_lengths);
            std::string tok;
            while (std::getline(ss, tok, ',')) lengths.push_back(std::stoul(tok));
            auto rep = bench_complexity(lengths, be_dim, be_reps);
            const std::string csv = bench_csv(rep);
            std::cout << csv;
            std::printf("log-log slopes: secmamba %.3f, attention %.3f\n", rep.secmamba_slope,
                        rep.attention_slope);
            if (!be_out.empty()) {
                std::ofstream f(be_out, std::ios::binary);
                f << csv;
            }
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
