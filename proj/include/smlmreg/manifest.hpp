#pragma once

#include <array>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>
#include <openssl/evp.h>

#include "smlmreg/pipeline.hpp"

namespace smlmreg {

/// Lower-case hex SHA-256 of a file's bytes.
inline std::string sha256_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open '" + path + "' for hashing");
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
    if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw Error("SHA-256 unavailable");
    std::array<char, 1 << 16> buf{};
    while (in) {
        in.read(buf.data(), buf.size());
        if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
    }
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx.get(), md.data(), &len);
    std::string hex;
    char tmp[3];
    for (unsigned int i = 0; i < len; ++i) {
        std::snprintf(tmp, sizeof tmp, "%02x", md[i]);
        hex += tmp;
    }
    return hex;
}

inline nlohmann::json to_json(const RegistrationConfig& c) {
    nlohmann::json j;
    j["n_components"] = c.n_components;
    j["outlier_fraction"] = c.outlier_fraction;
    j["max_iters"] = c.max_iters;
    j["rel_loglik_tol"] = c.rel_loglik_tol;
    j["rng_seed"] = c.rng_seed;
    j["mode"] = to_string(c.mode);
    j["samples_per_point"] = c.samples_per_point;
    j["variance_floor"] = c.variance_floor ? nlohmann::json(*c.variance_floor) : nlohmann::json(nullptr);
    j["initial_variance"] = c.initial_variance ? nlohmann::json(*c.initial_variance) : nlohmann::json(nullptr);
    j["fix_weights"] = c.fix_weights;
    j["dense_budget"] = c.dense_budget;
    j["truncation_threshold"] = c.truncation_threshold;
    return j;
}

inline nlohmann::json to_json(const SweepSpec& s) {
    nlohmann::json j;
    j["model"] = s.model;
    j["n_points"] = s.n_points;
    j["sigmas"] = s.sigmas;
    j["rs"] = s.rs;
    j["replicates"] = s.replicates;
    j["n_views"] = s.n_views;
    j["restarts"] = s.restarts;
    j["init_std_deg"] = s.init_std_deg;
    j["seed"] = s.seed;
    j["n_components"] = s.n_components ? nlohmann::json(*s.n_components) : nlohmann::json(nullptr);
    j["sigma_spatial_std_factor"] =
        s.sigma_spatial_std_factor ? nlohmann::json(*s.sigma_spatial_std_factor) : nlohmann::json(nullptr);
    j["noise_interpretation"] = s.interpretation == NoiseInterpretation::variance ? "variance" : "std_dev";
    j["registration"] = to_json(s.registration);
    j["record_timing"] = s.record_timing;
    return j;
}

/// Record of one command: configuration, seed, input digests, outputs and
/// wall time.
struct RunManifest {
    std::string command;
    nlohmann::json config = nlohmann::json::object();
    std::uint64_t seed = 0;
    std::string mode;
    std::vector<std::string> inputs;
    std::vector<std::string> outputs;
    double seconds = 0.0;
    nlohmann::json failures = nlohmann::json::array();

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["command"] = command;
        j["config"] = config;
        j["seed"] = seed;
        j["mode"] = mode;
        nlohmann::json in = nlohmann::json::array();
        for (const auto& p : inputs) in.push_back({{"path", p}, {"sha256", sha256_file(p)}});
        j["inputs"] = in;
        nlohmann::json out = nlohmann::json::array();
        for (const auto& p : outputs) {
            out.push_back({{"path", p}, {"sha256", std::filesystem::exists(p) ? sha256_file(p) : std::string()}});
        }
        j["outputs"] = out;
        j["timing"] = {{"wall_seconds", seconds}};
        j["failures"] = failures;
        return j;
    }

    void write(const std::string& path) const {
        auto out = open_output(path);
        out << to_json().dump(2) << '\n';
    }
};

struct SweepOutput {
    std::vector<SweepRow> rows;
    std::string csv_path;
    std::string manifest_path;
};

/// Runs the sweep and writes `sweep.csv` and `manifest.json` into out_dir.
/// Failed cells keep their row with NaN metrics.
inline SweepOutput run_sweep(const SweepSpec& spec, const std::string& out_dir, unsigned workers = 0) {
    spec.validate();
    std::filesystem::create_directories(out_dir);
    SweepOutput result;
    result.csv_path = (std::filesystem::path(out_dir) / "sweep.csv").string();
    result.manifest_path = (std::filesystem::path(out_dir) / "manifest.json").string();

    const auto t0 = std::chrono::steady_clock::now();
    auto csv = open_output(result.csv_path);
    csv << sweep_header() << '\n';
    result.rows = run_sweep_rows(spec, workers, [&](const SweepRow& row) {
        write_sweep_row(csv, row);
        csv.flush();
    });
    csv.close();

    RunManifest m;
    m.command = "sweep";
    m.config = to_json(spec);
    m.seed = spec.seed;
    m.mode = "both";
    if (spec.model != "triplets" && spec.model != "centriole") m.inputs.push_back(spec.model);
    m.outputs.push_back(result.csv_path);
    for (const auto& row : result.rows) {
        if (row.failed()) {
            m.failures.push_back({{"sigma", row.sigma}, {"r", row.r}, {"replicate", row.replicate},
                                  {"mode", to_string(row.mode)}, {"error", row.error}});
        }
    }
    m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    m.write(result.manifest_path);
    return result;
}

}  // namespace smlmreg
