#include "blkprune/sparsity.hpp"

#include "blkprune/envelope.hpp"

#include <cmath>
#include <sstream>

namespace blkprune {

SparsityPattern SparsityPattern::unstructured(double ratio, bool per_layer) {
    if (!(ratio > 0.0 && ratio < 1.0)) {
        throw ContractError("unstructured sparsity ratio must lie in (0, 1)");
    }
    SparsityPattern p;
    p.kind = Kind::Unstructured;
    p.ratio = ratio;
    p.per_layer = per_layer;
    return p;
}

SparsityPattern SparsityPattern::nm(int n_keep, int m_group) {
    if (n_keep <= 0 || m_group <= 0 || n_keep >= m_group) {
        throw ContractError("N:M sparsity requires 0 < n < m");
    }
    SparsityPattern p;
    p.kind = Kind::NM;
    p.n_keep = n_keep;
    p.m_group = m_group;
    return p;
}

SparsityPattern SparsityPattern::parse(const std::string& text) {
    auto colon = text.find(':');
    if (colon == std::string::npos) throw ContractError("bad sparsity pattern '" + text + "'");
    const std::string head = text.substr(0, colon), tail = text.substr(colon + 1);
    try {
        if (head == "unstructured") return unstructured(std::stod(tail), false);
        if (head == "unstructured-layer") return unstructured(std::stod(tail), true);
        std::size_t used_n = 0, used_m = 0;
        const int n = std::stoi(head, &used_n);
        const int m = std::stoi(tail, &used_m);
        if (used_n != head.size() || used_m != tail.size()) throw std::invalid_argument(text);
        return nm(n, m);
    } catch (const std::logic_error&) {
        throw ContractError("bad sparsity pattern '" + text + "'");
    }
}

std::string SparsityPattern::to_string() const {
    if (kind == Kind::NM) return std::to_string(n_keep) + ":" + std::to_string(m_group);
    std::ostringstream os;
    os << (per_layer ? "unstructured-layer:" : "unstructured:") << ratio;
    return os.str();
}

double SparsityPattern::density() const {
    if (kind == Kind::NM) return static_cast<double>(n_keep) / m_group;
    return 1.0 - ratio;
}

Index SparsityPattern::keep_count(Index count) const {
    if (kind == Kind::NM) return count / m_group * n_keep;
    // ceil((1 - s) * count), guarded against products like 0.3 * 10 = 3.0000000000000004.
    const double raw = (1.0 - ratio) * static_cast<double>(count);
    return static_cast<Index>(std::ceil(raw - 1e-9));
}

std::string MaskViolation::describe() const {
    std::ostringstream os;
    os << (layer.empty() ? "mask" : layer);
    if (row >= 0) os << " row " << row;
    if (group >= 0) os << " group " << group;
    os << ": kept " << kept << ", expected " << expected;
    return os.str();
}

std::vector<MaskViolation> verify_mask(const MaskMatrix& mask, const SparsityPattern& pattern,
                                       const std::string& layer) {
    std::vector<MaskViolation> out;
    const Index rows = mask.rows(), cols = mask.cols();
    if (pattern.kind == SparsityPattern::Kind::NM) {
        const Index m = pattern.m_group;
        if (cols % m != 0) {
            out.push_back({layer, -1, -1, mask.count(), -1});
            return out;
        }
        for (Index r = 0; r < rows; ++r) {
            for (Index g = 0; g < cols / m; ++g) {
                const Index kept = mask.row(r).segment(g * m, m).count();
                if (kept != pattern.n_keep) out.push_back({layer, r, g, kept, pattern.n_keep});
            }
        }
    } else if (!pattern.per_layer) {
        const Index expected = pattern.keep_count(cols);
        for (Index r = 0; r < rows; ++r) {
            const Index kept = mask.row(r).count();
            if (kept != expected) out.push_back({layer, r, -1, kept, expected});
        }
    } else {
        const Index expected = pattern.keep_count(mask.size());
        if (mask.count() != expected) out.push_back({layer, -1, -1, mask.count(), expected});
    }
    return out;
}

BlockMask full_mask(const ModelConfig& cfg) {
    BlockMask m;
    for (LinearId id : kLinearIds) {
        auto [r, c] = linear_shape(cfg, id);
        m[index_of(id)] = MaskMatrix::Constant(r, c, true);
    }
    return m;
}

double achieved_sparsity(const BlockMask& mask) {
    Index total = 0, kept = 0;
    for (const auto& m : mask) {
        total += m.size();
        kept += m.count();
    }
    return total == 0 ? 0.0 : 1.0 - static_cast<double>(kept) / static_cast<double>(total);
}

std::vector<std::uint8_t> pack_bits(const MaskMatrix& mask) {
    std::vector<std::uint8_t> out(static_cast<std::size_t>((mask.size() + 7) / 8), 0);
    for (Index i = 0; i < mask.size(); ++i) {
        if (mask.data()[i]) out[static_cast<std::size_t>(i / 8)] |= std::uint8_t(1u << (i % 8));
    }
    return out;
}

MaskMatrix unpack_bits(std::span<const std::uint8_t> packed, Index rows, Index cols) {
    if (static_cast<Index>(packed.size()) != (rows * cols + 7) / 8) {
        throw CorruptionError("bit-packed mask length disagrees with its shape");
    }
    MaskMatrix m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) {
        m.data()[i] = (packed[static_cast<std::size_t>(i / 8)] >> (i % 8)) & 1u;
    }
    return m;
}

void write_masks(const std::filesystem::path& path,
                 const std::vector<std::pair<std::string, MaskMatrix>>& masks,
                 const SparsityPattern& pattern) {
    EnvelopeWriter w("mask");
    w.header()["pattern"] = pattern.to_string();
    for (const auto& [name, m] : masks) {
        const auto packed = pack_bits(m);
        w.add_bits(name, {m.rows(), m.cols()}, packed);
    }
    w.write(path);
}

std::vector<std::pair<std::string, MaskMatrix>> read_masks(const std::filesystem::path& path) {
    const Envelope env = Envelope::read(path, "mask");
    std::vector<std::pair<std::string, MaskMatrix>> out;
    for (const auto& e : env.entries()) {
        if (e.shape.size() != 2) throw CorruptionError("mask '" + e.name + "' is not 2-D");
        const auto bits = env.bits(e.name);
        out.emplace_back(e.name, unpack_bits(bits, e.shape[0], e.shape[1]));
    }
    return out;
}

}  // namespace blkprune
