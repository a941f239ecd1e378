#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "csadapt/config.hpp"
#include "csadapt/errors.hpp"
#include "csadapt/tape.hpp"

namespace csadapt {

// Named parameter tensors in insertion order. Base weights live under
// "base.", adaptation weights under "adapt.", so a stage-1 checkpoint can be
// laid over a stage-0 one and the freeze policy is a prefix test.
class ParamStore {
public:
    Mat& add(const std::string& name, Mat init) {
        if (tensors_.count(name)) throw InternalError("duplicate parameter: " + name);
        order_.push_back(name);
        return tensors_.emplace(name, std::move(init)).first->second;
    }

    bool has(const std::string& name) const { return tensors_.count(name) != 0; }

    Mat& at(const std::string& name) {
        auto it = tensors_.find(name);
        if (it == tensors_.end()) throw InternalError("unknown parameter: " + name);
        return it->second;
    }
    const Mat& at(const std::string& name) const {
        auto it = tensors_.find(name);
        if (it == tensors_.end()) throw InternalError("unknown parameter: " + name);
        return it->second;
    }

    const std::vector<std::string>& names() const { return order_; }
    size_t size() const { return order_.size(); }

    int64_t total_elements() const {
        int64_t n = 0;
        for (const auto& name : order_) n += tensors_.at(name).size();
        return n;
    }

private:
    std::vector<std::string> order_;
    std::map<std::string, Mat> tensors_;
};

struct ParamPartition {
    std::set<std::string> frozen;
    std::set<std::string> trainable;
};

// Predicate partitioning parameters by name. Stage base trains everything
// under "base."; stage adapt freezes "base." and trains "adapt.". Any other
// prefix fails closed.
struct FreezePolicy {
    TrainStage stage = TrainStage::adapt;

    bool trainable(const std::string& name) const {
        if (name.rfind("base.", 0) == 0) return stage == TrainStage::base;
        if (name.rfind("adapt.", 0) == 0) return stage == TrainStage::adapt;
        throw InternalError("unclassified parameter: " + name);
    }
};

inline ParamPartition classify_parameters(const FreezePolicy& policy, const ParamStore& params) {
    ParamPartition part;
    for (const auto& name : params.names()) {
        if (policy.trainable(name))
            part.trainable.insert(name);
        else
            part.frozen.insert(name);
    }
    return part;
}

// FNV-1a over the raw bytes of the named tensors, in name order.
inline uint64_t hash_params(const ParamStore& params, const std::set<std::string>& names) {
    uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const void* data, size_t n) {
        const unsigned char* p = static_cast<const unsigned char*>(data);
        for (size_t i = 0; i < n; ++i) {
            h ^= p[i];
            h *= 1099511628211ULL;
        }
    };
    for (const auto& name : names) {
        mix(name.data(), name.size());
        const Mat& m = params.at(name);
        mix(m.data(), sizeof(double) * static_cast<size_t>(m.size()));
    }
    return h;
}

// ---- checkpoint file ----
//
// Layout: magic "CSAD", u32 version, u64 header length, header JSON (configs
// + stage), u64 tensor count, then per tensor: u32 name length, name bytes,
// u64 rows, u64 cols, row-major f64 payload. Little-endian throughout.

struct Checkpoint {
    ModelConfig model;
    RefinerConfig refiner;
    VariantConfig variant;
    TrainStage stage = TrainStage::base;
    ParamStore params;
};

namespace detail {
inline void write_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
inline void write_u64(std::ostream& os, uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
inline uint32_t read_u32(std::istream& is) {
    uint32_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), 4)) throw ValidationError("checkpoint truncated");
    return v;
}
inline uint64_t read_u64(std::istream& is) {
    uint64_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), 8)) throw ValidationError("checkpoint truncated");
    return v;
}
}  // namespace detail

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw InputError("cannot open checkpoint for writing: " + path);
    os.write("CSAD", 4);
    detail::write_u32(os, 1);
    nlohmann::json header = {{"model", ckpt.model},
                             {"refiner", ckpt.refiner},
                             {"variant", ckpt.variant},
                             {"stage", ckpt.stage == TrainStage::base ? "base" : "adapt"}};
    std::string hs = header.dump();
    detail::write_u64(os, hs.size());
    os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    detail::write_u64(os, ckpt.params.size());
    for (const auto& name : ckpt.params.names()) {
        const Mat& m = ckpt.params.at(name);
        detail::write_u32(os, static_cast<uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::write_u64(os, static_cast<uint64_t>(m.rows()));
        detail::write_u64(os, static_cast<uint64_t>(m.cols()));
        for (int r = 0; r < m.rows(); ++r)
            for (int c = 0; c < m.cols(); ++c) {
                double v = m(r, c);
                os.write(reinterpret_cast<const char*>(&v), 8);
            }
    }
    if (!os) throw InputError("checkpoint write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InputError("cannot open checkpoint: " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "CSAD", 4) != 0)
        throw ValidationError("not a checkpoint file: " + path);
    uint32_t version = detail::read_u32(is);
    if (version != 1) throw ValidationError("unsupported checkpoint version");
    uint64_t hlen = detail::read_u64(is);
    std::string hs(hlen, '\0');
    if (!is.read(hs.data(), static_cast<std::streamsize>(hlen))) throw ValidationError("checkpoint truncated");
    Checkpoint ckpt;
    try {
        nlohmann::json header = nlohmann::json::parse(hs);
        header.at("model").get_to(ckpt.model);
        header.at("refiner").get_to(ckpt.refiner);
        header.at("variant").get_to(ckpt.variant);
        std::string stage = header.at("stage").get<std::string>();
        if (stage == "base")
            ckpt.stage = TrainStage::base;
        else if (stage == "adapt")
            ckpt.stage = TrainStage::adapt;
        else
            throw ValidationError("unknown checkpoint stage: " + stage);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("bad checkpoint header: ") + e.what());
    }
    ckpt.model.validate();
    ckpt.refiner.validate();
    uint64_t n = detail::read_u64(is);
    for (uint64_t k = 0; k < n; ++k) {
        uint32_t nl = detail::read_u32(is);
        std::string name(nl, '\0');
        if (!is.read(name.data(), nl)) throw ValidationError("checkpoint truncated");
        uint64_t rows = detail::read_u64(is);
        uint64_t cols = detail::read_u64(is);
        if (rows > (1u << 24) || cols > (1u << 24)) throw ValidationError("implausible tensor shape in checkpoint");
        Mat m(static_cast<int>(rows), static_cast<int>(cols));
        for (uint64_t r = 0; r < rows; ++r)
            for (uint64_t c = 0; c < cols; ++c) {
                double v;
                if (!is.read(reinterpret_cast<char*>(&v), 8)) throw ValidationError("checkpoint truncated");
                m(static_cast<int>(r), static_cast<int>(c)) = v;
            }
        ckpt.params.add(name, std::move(m));
    }
    return ckpt;
}

}  // namespace csadapt
