// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "kvedit/errors.hpp"
#include "kvedit/model.hpp"
#include "kvedit/tensor_io.hpp"

namespace kvedit {

// Checkpoint layout: text manifest, then one rank-1 TNSR blob holding all
// parameters back to back.
//
//   KVCKPT 1
//   config <image_size> <channels> <patch_size> <token_dim> <layers> <heads> <num_conditions> <mlp_ratio>
//   params <count>
//   <name> <d0>x<d1>... <offset>     (offset in floats into the blob)
//   end
//   <TNSR blob>

namespace detail {

inline std::string dims_str(const Shape& s) {
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
    return out.empty() ? "scalar" : out;
}

} // namespace detail

template <class T>
void save_checkpoint(const std::filesystem::path& path, const ModelWeights<T>& w) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    const ModelConfig& c = w.config;
    os << "KVCKPT 1\nconfig " << c.image_size << ' ' << c.channels << ' ' << c.patch_size << ' ' << c.token_dim << ' '
       << c.layers << ' ' << c.heads << ' ' << c.num_conditions << ' ' << c.mlp_ratio << '\n';
    std::size_t count = 0;
    w.for_each_param([&](const std::string&, const Tensor<T>&) { ++count; });
    os << "params " << count << '\n';
    std::size_t offset = 0;
    w.for_each_param([&](const std::string& name, const Tensor<T>& t) {
        os << name << ' ' << detail::dims_str(t.shape()) << ' ' << offset << '\n';
        offset += t.size();
    });
    os << "end\n";
    const std::vector<T> flat = w.flat_params();
    write_tnsr(os, Tensor<T>({flat.size()}, flat));
    if (!os) throw IoError("write failed: " + path.string());
}

template <class T>
ModelWeights<T> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path.string());
    const std::string src = path.string();
    auto fail = [&](const std::string& what) {
        return IoError(src + ": " + what + " at byte offset " + std::to_string(static_cast<long long>(is.tellg())));
    };
    auto line = [&](const char* what) {
        std::string l;
        if (!std::getline(is, l)) throw fail(std::string("truncated manifest, expected ") + what);
        return l;
    };
    if (line("header") != "KVCKPT 1") throw IoError(src + ": bad checkpoint header at byte offset 0");

    ModelConfig cfg;
    {
        std::istringstream ls(line("config"));
        std::string tag;
        ls >> tag >> cfg.image_size >> cfg.channels >> cfg.patch_size >> cfg.token_dim >> cfg.layers >> cfg.heads >>
            cfg.num_conditions >> cfg.mlp_ratio;
        if (tag != "config" || !ls) throw fail("malformed config line");
    }
    try {
        cfg.validate();
    } catch (const ConfigError& e) {
        throw IoError(src + ": stored config is invalid: " + e.what());
    }
    ModelWeights<T> w = ModelWeights<T>::shaped(cfg);

    std::size_t count = 0;
    {
        std::istringstream ls(line("params"));
        std::string tag;
        ls >> tag >> count;
        if (tag != "params" || !ls) throw fail("malformed params line");
    }
    std::size_t expected_count = 0, offset = 0;
    w.for_each_param([&](const std::string& name, const Tensor<T>& t) {
        ++expected_count;
        std::istringstream ls(line("parameter entry"));
        std::string n, dims;
        std::size_t off = 0;
        ls >> n >> dims >> off;
        if (!ls) throw fail("malformed parameter entry for " + name);
        if (n != name || dims != detail::dims_str(t.shape()) || off != offset)
            throw fail("parameter entry '" + n + " " + dims + " " + std::to_string(off) + "' does not match expected '" +
                       name + " " + detail::dims_str(t.shape()) + " " + std::to_string(offset) + "'");
        offset += t.size();
    });
    if (count != expected_count) throw fail("params count " + std::to_string(count) + " differs from model layout");
    if (line("end") != "end") throw fail("missing end marker");

    const Tensor<T> blob = read_tnsr<T>(is, src);
    if (blob.rank() != 1 || blob.size() != offset)
        throw fail("parameter blob holds " + std::to_string(blob.size()) + " values, expected " + std::to_string(offset));
    if (is.peek() != std::char_traits<char>::eof()) throw fail("trailing bytes after parameter blob");
    std::size_t k = 0;
    w.for_each_param([&](const std::string&, Tensor<T>& t) {
        for (auto& v : t.values()) v = blob[k++];
    });
    return w;
}

} // namespace kvedit
