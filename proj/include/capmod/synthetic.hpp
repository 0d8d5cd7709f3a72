#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "capmod/dataset.hpp"
#include "capmod/errors.hpp"
#include "capmod/features_io.hpp"
#include "capmod/rng.hpp"
#include "capmod/vocab.hpp"

namespace capmod {

// Toy captioning world: two colored objects on a small grid. The gold
// caption follows a fixed grammar; the existing caption is the gold one
// passed through a corruption policy. Object categories with several
// surface forms pick one per example, and that pick is visible only in
// the captions (features carry the category one-hot), so reproducing
// gold requires actually reading the existing caption.
struct SyntheticSpec {
    std::size_t grid = 2;          // grid side length; cells = grid*grid
    double feature_noise = 0.05;   // gaussian sigma on every feature entry
    double p_none = 0.25;
    double p_swap_word = 0.25;
    double p_delete_span = 0.25;
    double p_wrong_object = 0.25;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["grid"] = grid;
        j["feature_noise"] = feature_noise;
        j["p_none"] = p_none;
        j["p_swap_word"] = p_swap_word;
        j["p_delete_span"] = p_delete_span;
        j["p_wrong_object"] = p_wrong_object;
        return j;
    }

    static SyntheticSpec from_json(const nlohmann::json& j) {
        SyntheticSpec s;
        auto known = s.to_json();
        for (const auto& [key, val] : j.items()) {
            if (!known.contains(key)) throw ConfigError("unknown generator spec key: " + key);
            (void)val;
        }
        if (j.contains("grid")) s.grid = j.at("grid").get<std::size_t>();
        auto set_d = [&](const char* k, double& f) {
            if (j.contains(k)) f = j.at(k).get<double>();
        };
        set_d("feature_noise", s.feature_noise);
        set_d("p_none", s.p_none);
        set_d("p_swap_word", s.p_swap_word);
        set_d("p_delete_span", s.p_delete_span);
        set_d("p_wrong_object", s.p_wrong_object);
        return s;
    }

    static SyntheticSpec load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw IoError("cannot open generator spec " + path);
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& ex) {
            throw ConfigError(path + ": " + ex.what());
        }
        return from_json(j);
    }
};

namespace synth {

struct Category {
    const char* canonical;
    std::vector<const char*> surfaces;  // includes the canonical form
};

inline const std::vector<Category>& categories() {
    static const std::vector<Category> cats = {
        {"cat", {"cat", "kitten"}},
        {"dog", {"dog", "puppy"}},
        {"rabbit", {"rabbit", "bunny"}},
        {"ball", {"ball"}},
        {"box", {"box"}},
        {"tree", {"tree"}},
        {"car", {"car"}},
        {"bird", {"bird"}},
    };
    return cats;
}

inline const std::vector<const char*>& colors() {
    static const std::vector<const char*> c = {"red", "blue", "green", "yellow"};
    return c;
}

}  // namespace synth

struct SyntheticExample {
    std::string id;
    Shape image_shape;
    std::vector<float> image_data;   // (cells+1) x d_v, global mean row last
    Shape region_shape;
    std::vector<float> region_data;  // 2 x d_b, reading order
    std::vector<std::string> gold;
    std::vector<std::string> existing;
    std::vector<std::string> attributes;
    std::string policy;
};

inline std::size_t synthetic_dv() { return synth::categories().size() + synth::colors().size() + 1; }
inline std::size_t synthetic_db() { return synth::categories().size() + synth::colors().size() + 2; }

namespace synth {

inline std::vector<std::string> corrupt_swap_word(std::vector<std::string> toks, SplitMix64& rng) {
    while (true) {
        std::size_t i = rng.next_below(toks.size());
        std::size_t j = rng.next_below(toks.size());
        if (i != j && toks[i] != toks[j]) {
            std::swap(toks[i], toks[j]);
            return toks;
        }
    }
}

inline std::vector<std::string> corrupt_delete_span(std::vector<std::string> toks,
                                                    SplitMix64& rng) {
    std::size_t start = rng.next_below(toks.size());
    std::size_t max_span = std::min<std::size_t>(3, toks.size() - start);
    std::size_t span = 1 + rng.next_below(max_span);
    toks.erase(toks.begin() + static_cast<std::ptrdiff_t>(start),
               toks.begin() + static_cast<std::ptrdiff_t>(start + span));
    return toks;
}

// Replaces one object word with a surface form that appears nowhere in
// the gold caption, so the result always contains a foreign token.
inline std::vector<std::string> corrupt_wrong_object(std::vector<std::string> toks,
                                                     SplitMix64& rng) {
    std::size_t slot = rng.bernoulli(0.5) ? 2 : 6;
    while (true) {
        const auto& cat = categories()[rng.next_below(categories().size())];
        const char* surf = cat.surfaces[rng.next_below(cat.surfaces.size())];
        bool in_gold = false;
        for (const auto& t : toks)
            if (t == surf) in_gold = true;
        if (!in_gold) {
            toks[slot] = surf;
            return toks;
        }
    }
}

}  // namespace synth

inline std::vector<SyntheticExample> generate_synthetic(const SyntheticSpec& spec, std::size_t n,
                                                        std::uint64_t seed) {
    if (n < 1) throw ContractError("generate_synthetic: n must be >= 1");
    if (spec.grid < 1 || spec.grid > 8)
        throw ContractError("generate_synthetic: grid must be in [1,8]");
    std::size_t cells = spec.grid * spec.grid;
    if (cells < 2) throw ContractError("generate_synthetic: need at least 2 cells");
    double psum = spec.p_none + spec.p_swap_word + spec.p_delete_span + spec.p_wrong_object;
    if (psum <= 0) throw ContractError("generate_synthetic: corruption probabilities sum to 0");

    const auto& cats = synth::categories();
    const auto& cols = synth::colors();
    std::size_t dv = synthetic_dv();
    std::size_t db = synthetic_db();

    std::vector<SyntheticExample> out;
    out.reserve(n);
    for (std::size_t idx = 0; idx < n; ++idx) {
        SplitMix64 rng = substream(seed, "example-" + std::to_string(idx));
        SyntheticExample ex;
        {
            char buf[32];
            std::snprintf(buf, sizeof buf, "s%06zu", idx);
            ex.id = buf;
        }

        // scene: two distinct categories in two distinct cells
        std::size_t cat_a = rng.next_below(cats.size());
        std::size_t cat_b = rng.next_below(cats.size() - 1);
        if (cat_b >= cat_a) ++cat_b;
        std::size_t cell_a = rng.next_below(cells);
        std::size_t cell_b = rng.next_below(cells - 1);
        if (cell_b >= cell_a) ++cell_b;
        if (cell_b < cell_a) {  // reading order: object A sits in the earlier cell
            std::swap(cat_a, cat_b);
            std::swap(cell_a, cell_b);
        }
        std::size_t col_a = rng.next_below(cols.size());
        std::size_t col_b = rng.next_below(cols.size());
        std::size_t row_a = cell_a / spec.grid, row_b = cell_b / spec.grid;

        // surface forms are chosen here and appear only in the captions
        const char* surf_a = cats[cat_a].surfaces[rng.next_below(cats[cat_a].surfaces.size())];
        const char* surf_b = cats[cat_b].surfaces[rng.next_below(cats[cat_b].surfaces.size())];
        const char* rel = (row_a == row_b) ? "beside" : "above";

        ex.gold = {"a", cols[col_a], surf_a, rel, "a", cols[col_b], surf_b};

        // image features: one row per cell [category one-hot | color one-hot |
        // occupied] plus noise, then the mean row appended as the global feature
        ex.image_shape = {cells + 1, dv};
        ex.image_data.assign((cells + 1) * dv, 0.0f);
        auto set_cell = [&](std::size_t cell, std::size_t cat, std::size_t col) {
            ex.image_data[cell * dv + cat] = 1.0f;
            ex.image_data[cell * dv + cats.size() + col] = 1.0f;
            ex.image_data[cell * dv + dv - 1] = 1.0f;
        };
        set_cell(cell_a, cat_a, col_a);
        set_cell(cell_b, cat_b, col_b);
        for (std::size_t i = 0; i < cells * dv; ++i)
            ex.image_data[i] += static_cast<float>(rng.normal(0.0, spec.feature_noise));
        for (std::size_t jcol = 0; jcol < dv; ++jcol) {
            float s = 0.0f;
            for (std::size_t i = 0; i < cells; ++i) s += ex.image_data[i * dv + jcol];
            ex.image_data[cells * dv + jcol] = s / static_cast<float>(cells);
        }

        // region features: one row per object [category one-hot | color
        // one-hot | row | col], reading order
        ex.region_shape = {2, db};
        ex.region_data.assign(2 * db, 0.0f);
        auto set_region = [&](std::size_t r, std::size_t cat, std::size_t col, std::size_t cell) {
            ex.region_data[r * db + cat] = 1.0f;
            ex.region_data[r * db + cats.size() + col] = 1.0f;
            ex.region_data[r * db + db - 2] = static_cast<float>(cell / spec.grid);
            ex.region_data[r * db + db - 1] = static_cast<float>(cell % spec.grid);
        };
        set_region(0, cat_a, col_a, cell_a);
        set_region(1, cat_b, col_b, cell_b);
        for (auto& v : ex.region_data)
            v += static_cast<float>(rng.normal(0.0, spec.feature_noise));

        // corruption policy
        double u = rng.next_double() * psum;
        if ((u -= spec.p_none) < 0) {
            ex.policy = "none";
            ex.existing = ex.gold;
        } else if ((u -= spec.p_swap_word) < 0) {
            ex.policy = "swap-word";
            ex.existing = synth::corrupt_swap_word(ex.gold, rng);
        } else if ((u -= spec.p_delete_span) < 0) {
            ex.policy = "delete-span";
            ex.existing = synth::corrupt_delete_span(ex.gold, rng);
        } else {
            ex.policy = "wrong-object";
            ex.existing = synth::corrupt_wrong_object(ex.gold, rng);
        }

        ex.attributes = derive_attributes({ex.gold}, {cats[cat_a].canonical,
                                                      cats[cat_b].canonical});
        out.push_back(std::move(ex));
    }
    return out;
}

// Materializes a generated set as <dir>/<name>.jsonl plus LAMF feature
// files under <dir>/features/.
inline std::vector<RawExample> write_synthetic_dataset(const std::vector<SyntheticExample>& exs,
                                                       const std::string& dir,
                                                       const std::string& name) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "features");
    std::vector<RawExample> raws;
    raws.reserve(exs.size());
    for (const auto& ex : exs) {
        std::string img_rel = "features/" + ex.id + "_img.lamf";
        std::string reg_rel = "features/" + ex.id + "_reg.lamf";
        write_features((fs::path(dir) / img_rel).string(), ex.image_shape, ex.image_data);
        write_features((fs::path(dir) / reg_rel).string(), ex.region_shape, ex.region_data);
        RawExample r;
        r.id = ex.id;
        r.image_features_path = img_rel;
        r.region_features_path = reg_rel;
        r.existing = join_ws(ex.existing);
        r.attributes = ex.attributes;
        r.gold = {join_ws(ex.gold)};
        r.policy = ex.policy;
        raws.push_back(std::move(r));
    }
    save_dataset((fs::path(dir) / (name + ".jsonl")).string(), raws);
    return raws;
}

}  // namespace capmod
