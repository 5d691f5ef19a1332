// Training and inference CLI for the grid tensor-network classifier.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "peps/checkpoint_io.hpp"
#include "peps/idx_io.hpp"
#include "peps/training.hpp"

namespace fs = std::filesystem;

namespace {

struct RunSpec {
    std::string config_path;
    std::string data_dir;
    std::string out;         // metrics file
    std::string checkpoint;  // in (eval/predict/inspect) or out (train)
    std::size_t D = 2;
    std::size_t chi = 10;
    double lr = 1e-4;
    std::size_t batch = 100;
    std::size_t epochs = 100;
    std::uint64_t seed = 0;
    std::string feature = "product";
    std::string positivity = "off";
    std::size_t subset = 0;  // 0 = full dataset
    std::size_t workers = 1;
};

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

// Flat key=value config file; '#' starts a comment; unknown keys are fatal.
void apply_config_file(RunSpec& spec, const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file " + path);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error(path + ":" + std::to_string(lineno) +
                                     ": expected key=value");
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        try {
            if (key == "data_dir") spec.data_dir = val;
            else if (key == "out") spec.out = val;
            else if (key == "checkpoint") spec.checkpoint = val;
            else if (key == "d") spec.D = std::stoul(val);
            else if (key == "chi") spec.chi = std::stoul(val);
            else if (key == "lr") spec.lr = std::stod(val);
            else if (key == "batch") spec.batch = std::stoul(val);
            else if (key == "epochs") spec.epochs = std::stoul(val);
            else if (key == "seed") spec.seed = std::stoull(val);
            else if (key == "feature") spec.feature = val;
            else if (key == "positivity") spec.positivity = val;
            else if (key == "subset") spec.subset = std::stoul(val);
            else if (key == "workers") spec.workers = std::stoul(val);
            else
                throw std::runtime_error(path + ":" + std::to_string(lineno) +
                                         ": unknown config key '" + key + "'");
        } catch (const std::invalid_argument&) {
            throw std::runtime_error(path + ":" + std::to_string(lineno) +
                                     ": bad value for '" + key + "'");
        }
    }
}

void validate(const RunSpec& spec) {
    if (spec.D < 1) throw std::runtime_error("d must be at least 1");
    if (spec.chi < 1) throw std::runtime_error("chi must be at least 1");
    if (spec.batch < 1) throw std::runtime_error("batch must be at least 1");
    if (!(spec.lr > 0.0)) throw std::runtime_error("lr must be positive");
    if (spec.feature != "product" && spec.feature != "conv")
        throw std::runtime_error("feature must be product or conv");
    if (spec.positivity != "on" && spec.positivity != "off")
        throw std::runtime_error("positivity must be on or off");
    if (spec.workers < 1) throw std::runtime_error("workers must be at least 1");
}

fs::path find_idx(const fs::path& dir, const std::string& stem) {
    for (const char* suffix : {".gz", ""}) {
        fs::path p = dir / (stem + suffix);
        if (fs::exists(p)) return p;
    }
    throw std::runtime_error("missing " + (dir / stem).string() + "[.gz]");
}

peps::Dataset load_split(const fs::path& dir, bool train) {
    const std::string img = train ? "train-images-idx3-ubyte" : "t10k-images-idx3-ubyte";
    const std::string lab = train ? "train-labels-idx1-ubyte" : "t10k-labels-idx1-ubyte";
    return peps::load_dataset(find_idx(dir, img), find_idx(dir, lab), train ? "train" : "test");
}

peps::TrainConfig to_train_config(const RunSpec& spec) {
    peps::TrainConfig cfg;
    cfg.D = spec.D;
    cfg.chi = spec.chi;
    cfg.lr = spec.lr;
    cfg.batch = spec.batch;
    cfg.epochs = spec.epochs;
    cfg.seed = spec.seed;
    cfg.positivity = spec.positivity == "on";
    cfg.feature =
        spec.feature == "conv" ? peps::FeatureKind::conv : peps::FeatureKind::product;
    return cfg;
}

peps::Checkpoint fresh_model(const RunSpec& spec, const peps::Dataset& train) {
    if (train.size() == 0) throw std::runtime_error("empty training set");
    std::size_t L, d;
    if (spec.feature == "conv") {
        L = 14;
        d = 10;
    } else {
        const peps::Image& img = train.images[0];
        L = (img.rows + 1) / 2;
        if ((img.cols + 1) / 2 != L) throw std::runtime_error("images must block to a square grid");
        d = 16;
    }
    peps::Checkpoint ck;
    ck.grid = peps::init_grid(L, spec.D, d, 10, spec.seed);
    ck.positivity = spec.positivity == "on";
    ck.feature = spec.feature == "conv" ? peps::FeatureKind::conv : peps::FeatureKind::product;
    if (ck.feature == peps::FeatureKind::conv) ck.conv = peps::ConvParams::init(spec.seed);
    if (ck.positivity) ck.grid = peps::apply_positivity(std::move(ck.grid));
    return ck;
}

std::vector<std::pair<std::string, std::string>> effective_config(const RunSpec& spec) {
    return {{"data_dir", spec.data_dir},
            {"out", spec.out},
            {"checkpoint", spec.checkpoint},
            {"d", std::to_string(spec.D)},
            {"chi", std::to_string(spec.chi)},
            {"lr", std::to_string(spec.lr)},
            {"batch", std::to_string(spec.batch)},
            {"epochs", std::to_string(spec.epochs)},
            {"seed", std::to_string(spec.seed)},
            {"feature", spec.feature},
            {"positivity", spec.positivity},
            {"subset", std::to_string(spec.subset)},
            {"workers", std::to_string(spec.workers)}};
}

int run_train(const RunSpec& spec) {
    validate(spec);
    if (spec.data_dir.empty()) throw std::runtime_error("train requires --data-dir");
    if (spec.checkpoint.empty()) throw std::runtime_error("train requires --checkpoint");

    peps::Dataset train = load_split(spec.data_dir, true);
    peps::Dataset test = load_split(spec.data_dir, false);
    if (spec.subset > 0) {
        train = peps::stratified_subset(train, std::min(spec.subset, train.size()), spec.seed);
        test = peps::stratified_subset(test, std::min(spec.subset / 2, test.size()), spec.seed);
    }
    const std::size_t val_count = std::min<std::size_t>(5000, train.size() / 5);
    auto [tr, va] = peps::split_train_val(train, std::max<std::size_t>(1, val_count), spec.seed);

    peps::Checkpoint model = fresh_model(spec, tr);
    const peps::TrainConfig cfg = to_train_config(spec);
    peps::Optimizer opt("adam", cfg.lr);

    std::optional<peps::MetricsWriter> metrics;
    if (!spec.out.empty()) metrics.emplace(spec.out, effective_config(spec));

    if (spec.epochs == 0) {
        peps::save_checkpoint(model, spec.checkpoint);
        return 0;
    }

    double best_val = -1.0, best_test = 0.0;
    const peps::ContractOptions opts{cfg.svd_eps, cfg.checkpoint_rows};
    for (std::size_t epoch = 1; epoch <= spec.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        const peps::EpochStats st = peps::train_epoch(model, tr, cfg, opt, epoch);
        const peps::EvalResult val = peps::evaluate(model, va, cfg.chi, opts);
        const peps::EvalResult tst = peps::evaluate(model, test, cfg.chi, opts);
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (metrics)
            metrics->row(epoch, st.train_loss, st.train_acc, val.accuracy, tst.accuracy, secs);
        if (val.accuracy > best_val) {
            best_val = val.accuracy;
            best_test = tst.accuracy;
            peps::save_checkpoint(model, spec.checkpoint);
        }
        std::cout << "epoch " << epoch << " train_loss " << st.train_loss << " train_acc "
                  << st.train_acc << " val_acc " << val.accuracy << " test_acc " << tst.accuracy
                  << "\n";
    }
    std::cout << "best test accuracy " << best_test << "\n";
    return 0;
}

int run_eval(const RunSpec& spec) {
    if (spec.checkpoint.empty()) throw std::runtime_error("eval requires --checkpoint");
    if (spec.data_dir.empty()) throw std::runtime_error("eval requires --data-dir");
    const peps::Checkpoint model = peps::load_checkpoint(spec.checkpoint);
    peps::Dataset test = load_split(spec.data_dir, false);
    if (spec.subset > 0)
        test = peps::stratified_subset(test, std::min(spec.subset, test.size()), spec.seed);
    const peps::EvalResult r = peps::evaluate(model, test, spec.chi);
    std::cout << "loss " << r.loss << " accuracy " << r.accuracy << "\n";
    return 0;
}

int run_predict(const RunSpec& spec, const std::string& target) {
    if (spec.checkpoint.empty()) throw std::runtime_error("predict requires --checkpoint");
    const peps::Checkpoint model = peps::load_checkpoint(spec.checkpoint);

    peps::Image img;
    const bool numeric = !target.empty() &&
                         target.find_first_not_of("0123456789") == std::string::npos;
    if (numeric) {
        if (spec.data_dir.empty())
            throw std::runtime_error("predict by index requires --data-dir");
        const peps::Dataset test = load_split(spec.data_dir, false);
        const std::size_t idx = std::stoul(target);
        if (idx >= test.size()) throw std::runtime_error("sample index out of range");
        img = test.images[idx];
    } else {
        const auto images = peps::parse_idx_images(peps::read_file_maybe_gzip(target));
        if (images.empty()) throw std::runtime_error("no images in " + target);
        img = images[0];
    }

    peps::Tape tape;
    const peps::ParamVars pv = peps::record_params(tape, model, false);
    const peps::TapeLogits out = peps::forward_sample(tape, model, pv, img, spec.chi, {});
    const std::vector<double> p = peps::logit_probabilities(tape.value(out.values));
    std::cout.precision(12);
    for (std::size_t i = 0; i < p.size(); ++i) std::cout << "p(" << i << ") " << p[i] << "\n";
    std::cout << "predicted " << peps::argmax_label(tape.value(out.values)) << "\n";
    return 0;
}

int run_inspect(const RunSpec& spec) {
    if (spec.checkpoint.empty()) throw std::runtime_error("inspect requires --checkpoint");
    const peps::Checkpoint model = peps::load_checkpoint(spec.checkpoint);
    const peps::PepsGrid& g = model.grid;
    std::cout << "L " << g.L << "\nD " << g.D << "\nd " << g.d << "\nT " << g.T << "\ncenter ("
              << g.center_row << ", " << g.center_col << ")\nparams " << g.param_count()
              << "\nmin_entry " << g.min_entry() << "\nmax_entry " << g.max_entry()
              << "\npositivity " << (model.positivity ? "on" : "off") << "\nfeature "
              << (model.feature == peps::FeatureKind::conv ? "conv" : "product") << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"grid tensor-network image classifier"};
    app.require_subcommand(1);

    RunSpec flags;
    std::string predict_target;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", flags.config_path, "key=value config file");
        cmd->add_option("--data-dir", flags.data_dir, "directory with IDX data files");
        cmd->add_option("--out", flags.out, "metrics CSV output path");
        cmd->add_option("--checkpoint", flags.checkpoint, "checkpoint path");
        cmd->add_option("--d", flags.D, "virtual bond dimension");
        cmd->add_option("--chi", flags.chi, "boundary truncation bond");
        cmd->add_option("--lr", flags.lr, "learning rate");
        cmd->add_option("--batch", flags.batch, "batch size");
        cmd->add_option("--epochs", flags.epochs, "training epochs");
        cmd->add_option("--seed", flags.seed, "random seed");
        cmd->add_option("--feature", flags.feature, "feature map: product or conv");
        cmd->add_option("--positivity", flags.positivity, "positivity projection: on or off");
        cmd->add_option("--subset", flags.subset, "stratified subset size (0 = all)");
        cmd->add_option("--workers", flags.workers, "worker thread cap");
        return cmd;
    };

    CLI::App* train = add_common(app.add_subcommand("train", "train a model"));
    CLI::App* eval_cmd = add_common(app.add_subcommand("eval", "evaluate a checkpoint"));
    CLI::App* predict = add_common(app.add_subcommand("predict", "classify one image"));
    predict->add_option("target", predict_target, "test-set index or IDX image file")->required();
    CLI::App* inspect = add_common(app.add_subcommand("inspect", "print checkpoint summary"));

    CLI11_PARSE(app, argc, argv);

    try {
        // Config file values apply first; any flag given on the command line wins.
        RunSpec spec;
        CLI::App* active = app.get_subcommands().front();
        if (active->count("--config")) apply_config_file(spec, flags.config_path);
        auto override_if = [&](const char* name, auto member) {
            if (active->count(name)) spec.*member = flags.*member;
        };
        override_if("--data-dir", &RunSpec::data_dir);
        override_if("--out", &RunSpec::out);
        override_if("--checkpoint", &RunSpec::checkpoint);
        override_if("--d", &RunSpec::D);
        override_if("--chi", &RunSpec::chi);
        override_if("--lr", &RunSpec::lr);
        override_if("--batch", &RunSpec::batch);
        override_if("--epochs", &RunSpec::epochs);
        override_if("--seed", &RunSpec::seed);
        override_if("--feature", &RunSpec::feature);
        override_if("--positivity", &RunSpec::positivity);
        override_if("--subset", &RunSpec::subset);
        override_if("--workers", &RunSpec::workers);

        if (active == train) return run_train(spec);
        if (active == eval_cmd) return run_eval(spec);
        if (active == predict) return run_predict(spec, predict_target);
        if (active == inspect) return run_inspect(spec);
        throw std::runtime_error("unknown subcommand");
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
