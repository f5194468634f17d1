#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace ferrosnn {

// Named flat tensor. Data is always double in memory; the on-disk container
// records dtype width and byte order explicitly.
struct Tensor {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<double> data;
    double bound = 0.0;  // per-layer weight bound, 0 if not applicable

    std::size_t size() const {
        std::size_t n = 1;
        for (auto d : shape) n *= d;
        return n;
    }
};

// Flat binary tensor container with a JSON manifest side file.
// <base>.bin holds the raw little-endian payloads back to back;
// <base>.json lists name, shape, bound, dtype width, byte order and offset.
class TensorStore {
public:
    void put(Tensor t);
    bool contains(const std::string& name) const;
    const Tensor& get(const std::string& name) const;
    Tensor& get(const std::string& name);
    std::vector<std::string> names() const;  // insertion order

    // Free-form metadata carried in the manifest (seeds, config digests, ...).
    std::map<std::string, std::string> meta;

    void save(const std::filesystem::path& base) const;
    static TensorStore load(const std::filesystem::path& base);

private:
    std::vector<Tensor> tensors_;
};

}  // namespace ferrosnn
