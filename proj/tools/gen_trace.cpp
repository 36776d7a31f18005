// Writes the synthetic corpus (trace, org map, upstream scripts) into a directory.
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "mbz/app/synthetic.hpp"

int main(int argc, char** argv) {
    CLI::App app{"gen_trace: synthetic third-party traffic corpus"};
    std::string out_dir = ".";
    std::uint64_t seed = 2024;
    app.add_option("--out", out_dir, "output directory");
    app.add_option("--seed", seed, "generator seed");
    CLI11_PARSE(app, argc, argv);

    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    auto corpus = mbz::synthetic::make_corpus(seed);
    try {
        mbz::write_trace_file(fs::path(out_dir) / "trace.jsonl", corpus.trace);
        std::ofstream(fs::path(out_dir) / "org_map.csv", std::ios::binary) << corpus.org_map_csv;
        std::ofstream(fs::path(out_dir) / "upstream.json", std::ios::binary) << corpus.upstream.dump(2) << '\n';
    } catch (const mbz::Error& e) {
        std::cerr << "gen_trace: " << e.what() << '\n';
        return 3;
    }
    std::cout << corpus.trace.size() << " packets, " << corpus.orgs.size() << " organizations\n";
    return 0;
}
