#pragma once

#include <cstdint>
#include <fstream>
#include <string>

#include <json.hpp>

#include "capmod/errors.hpp"

namespace capmod {

// Everything a run needs, serialized as one JSON document next to the
// run's outputs. Resolution order: built-in defaults, then command-line
// flags, then the config file; the file wins.
struct RunConfig {
    // model dimensions (full-scale values in comments where they differ)
    std::size_t d = 32;        // sentence-embedding / gate / output width (512)
    std::size_t h = 64;        // LSTM hidden size (1000)
    std::size_t emb = 32;      // word-embedding size (1000)
    std::size_t attn = 32;     // attention size (512)
    std::size_t max_len = 30;
    std::size_t min_count = 5;
    std::string attention = "spatial";  // or "region"

    // objective
    double beta = 0.4;
    double occurrence_threshold = 4.0;
    bool attr_term_enabled = false;

    // optimization
    double lr = 5e-4;
    double lr_decay = 0.8;
    std::size_t lr_decay_every = 3;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t batch_size = 16;  // 80 at full scale
    std::size_t max_epochs = 40;
    std::size_t patience = 6;
    double grad_clip = 5.0;
    double dropout = 0.5;

    // decoding
    std::size_t beam_size = 3;
    bool length_normalize = false;

    std::uint64_t seed = 42;
    // wall-clock timing in logs is off by default so identical seeds
    // produce byte-identical log files
    bool measure_time = false;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["d"] = d;
        j["h"] = h;
        j["emb"] = emb;
        j["attn"] = attn;
        j["max_len"] = max_len;
        j["min_count"] = min_count;
        j["attention"] = attention;
        j["beta"] = beta;
        j["occurrence_threshold"] = occurrence_threshold;
        j["attr_term_enabled"] = attr_term_enabled;
        j["lr"] = lr;
        j["lr_decay"] = lr_decay;
        j["lr_decay_every"] = lr_decay_every;
        j["adam_beta1"] = adam_beta1;
        j["adam_beta2"] = adam_beta2;
        j["adam_eps"] = adam_eps;
        j["batch_size"] = batch_size;
        j["max_epochs"] = max_epochs;
        j["patience"] = patience;
        j["grad_clip"] = grad_clip;
        j["dropout"] = dropout;
        j["beam_size"] = beam_size;
        j["length_normalize"] = length_normalize;
        j["seed"] = seed;
        j["measure_time"] = measure_time;
        return j;
    }

    // Overwrites only the keys present in j; unknown keys are an error.
    void apply_json(const nlohmann::json& j) {
        auto known = to_json();
        for (const auto& [key, val] : j.items()) {
            if (!known.contains(key)) throw ConfigError("unknown config key: " + key);
            (void)val;
        }
        auto set_sz = [&](const char* k, std::size_t& f) {
            if (j.contains(k)) f = j.at(k).get<std::size_t>();
        };
        auto set_d = [&](const char* k, double& f) {
            if (j.contains(k)) f = j.at(k).get<double>();
        };
        auto set_b = [&](const char* k, bool& f) {
            if (j.contains(k)) f = j.at(k).get<bool>();
        };
        auto set_s = [&](const char* k, std::string& f) {
            if (j.contains(k)) f = j.at(k).get<std::string>();
        };
        set_sz("d", d);
        set_sz("h", h);
        set_sz("emb", emb);
        set_sz("attn", attn);
        set_sz("max_len", max_len);
        set_sz("min_count", min_count);
        set_s("attention", attention);
        set_d("beta", beta);
        set_d("occurrence_threshold", occurrence_threshold);
        set_b("attr_term_enabled", attr_term_enabled);
        set_d("lr", lr);
        set_d("lr_decay", lr_decay);
        set_sz("lr_decay_every", lr_decay_every);
        set_d("adam_beta1", adam_beta1);
        set_d("adam_beta2", adam_beta2);
        set_d("adam_eps", adam_eps);
        set_sz("batch_size", batch_size);
        set_sz("max_epochs", max_epochs);
        set_sz("patience", patience);
        set_d("grad_clip", grad_clip);
        set_d("dropout", dropout);
        set_sz("beam_size", beam_size);
        set_b("length_normalize", length_normalize);
        if (j.contains("seed")) seed = j.at("seed").get<std::uint64_t>();
        set_b("measure_time", measure_time);
        validate();
    }

    void validate() const {
        if (d < 1 || h < 1 || emb < 1 || attn < 1) throw ConfigError("dimensions must be >= 1");
        if (attention != "spatial" && attention != "region")
            throw ConfigError("attention must be 'spatial' or 'region', got '" + attention + "'");
        if (beta < 0) throw ConfigError("beta must be >= 0");
        if (dropout < 0 || dropout >= 1) throw ConfigError("dropout must be in [0,1)");
        // lr 0 is allowed: it freezes the weights, useful for schedule and
        // early-stopping checks
        if (lr < 0 || lr_decay <= 0 || lr_decay > 1 || lr_decay_every < 1)
            throw ConfigError("bad lr schedule");
        if (batch_size < 1 || max_epochs < 1) throw ConfigError("bad batch/epoch settings");
        if (beam_size < 1) throw ConfigError("beam_size must be >= 1");
        if (max_len < 1) throw ConfigError("max_len must be >= 1");
    }

    static RunConfig load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw IoError("cannot open config " + path);
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& ex) {
            throw ConfigError(path + ": " + ex.what());
        }
        RunConfig c;
        c.apply_json(j);
        return c;
    }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::trunc);
        if (!out) throw IoError("cannot write config " + path);
        out << to_json().dump(2) << "\n";
    }
};

}  // namespace capmod
