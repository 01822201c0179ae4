#include <exception>
#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "defectlab/commands.hpp"

namespace {

struct Descriptions {
    const char* name;
    const char* help;
};

constexpr Descriptions kCommands[] = {
    {"synth", "Generate the synthetic train/test/pool patch sets"},
    {"preprocess", "Preprocess VOC-annotated images into train/test patch sets"},
    {"train", "Train the supervised CNN and report test metrics"},
    {"pseudolabel", "Run round-based pseudo-labeling"},
    {"transmatch", "Run a few-shot imprint, pseudo-label and fine-tune episode"},
    {"eval", "Evaluate a weight file on a patch set"},
};

}  // namespace

int main(int argc, char** argv) {
    using defectlab::cli::Options;
    CLI::App app{"defectlab: semi-supervised few-shot defect classification"};
    app.require_subcommand(1);
    Options opt;
    for (const auto& c : kCommands) {
        auto* sub = app.add_subcommand(c.name, c.help);
        sub->add_option("--config", opt.config, "JSON configuration file (a run manifest also works)");
        sub->add_option("--set", opt.sets, "Override a configuration value, e.g. train.epochs=5")->take_all();
        sub->add_option("--out", opt.out, "Output root; runs go to <out>/runs/<timestamp>-<digest>");
        sub->add_option("--run-dir", opt.run_dir, "Exact run directory (overrides --out)");
        if (std::string(c.name) == "preprocess") sub->add_option("--input", opt.input, "Directory of images and VOC XML");
        if (std::string(c.name) == "eval") sub->add_option("--weights", opt.weights, "Weight file to evaluate");
        sub->callback([&opt, sub] { opt.command = sub->get_name(); });
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }
    try {
        return defectlab::cli::run_command(opt, std::cerr);
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << '\n';
        return defectlab::cli::fail(e.what(), 1);
    }
}
