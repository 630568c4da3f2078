#include "emolora/adapterio.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>

#include <zlib.h>

#include "emolora/errors.hpp"
#include "emolora/schemes.hpp"

namespace emolora {

namespace {

constexpr char kMagic[4] = {'E', 'E', 'L', 'A'};

const char* kind_tag(ContainerKind k) {
    switch (k) {
    case ContainerKind::adapter: return "ADPT";
    case ContainerKind::base: return "BASE";
    case ContainerKind::corpus: return "CORP";
    }
    return "????";
}

std::uint32_t crc_of(std::string_view bytes) {
    return static_cast<std::uint32_t>(
        crc32(crc32(0L, Z_NULL, 0), reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

class Writer {
public:
    void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
    void u16(std::uint16_t v) {
        u8(static_cast<std::uint8_t>(v));
        u8(static_cast<std::uint8_t>(v >> 8));
    }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f32(float f) { u32(std::bit_cast<std::uint32_t>(f)); }
    void raw(std::string_view s) { out_.append(s); }
    void str16(std::string_view s, const char* what) {
        if (s.size() > 0xFFFF) throw FormatError(std::string(what) + " longer than 65535 bytes");
        u16(static_cast<std::uint16_t>(s.size()));
        raw(s);
    }
    std::string& bytes() { return out_; }

private:
    std::string out_;
};

class Reader {
public:
    explicit Reader(std::string_view data) : data_(data) {}

    void need(std::size_t n, const char* what) const {
        if (data_.size() - pos_ < n) {
            throw FormatError(std::string("truncated container while reading ") + what);
        }
    }
    std::uint8_t u8(const char* what) {
        need(1, what);
        return static_cast<std::uint8_t>(data_[pos_++]);
    }
    std::uint16_t u16(const char* what) {
        need(2, what);
        const auto lo = static_cast<std::uint8_t>(data_[pos_]), hi = static_cast<std::uint8_t>(data_[pos_ + 1]);
        pos_ += 2;
        return static_cast<std::uint16_t>(lo | (hi << 8));
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(data_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }
    float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
    std::string_view raw(std::size_t n, const char* what) {
        need(n, what);
        const std::string_view s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::string str16(const char* what) {
        const std::uint16_t n = u16(what);
        return std::string(raw(n, what));
    }
    void floats(std::vector<float>& out, std::size_t n, const char* what) {
        need(n * 4, what);
        out.resize(n);
        for (std::size_t i = 0; i < n; ++i) out[i] = f32(what);
    }
    bool done() const { return pos_ == data_.size(); }

private:
    std::string_view data_;
    std::size_t pos_ = 0;
};

std::string hex32(std::uint32_t v) {
    char buf[9];
    std::snprintf(buf, sizeof buf, "%08x", v);
    return buf;
}

std::uint32_t parse_hex32(const std::string& s) {
    std::uint32_t v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v, 16);
    if (ec != std::errc() || ptr != s.data() + s.size()) throw FormatError("bad checksum field '" + s + "'");
    return v;
}

int parse_int(const std::string& s, const std::string& key) {
    int v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) throw FormatError("bad integer for '" + key + "': " + s);
    return v;
}

} // namespace

std::pair<std::size_t, std::size_t> payload_lengths(ContainerKind kind, std::uint16_t rank, const Record& r) {
    const std::size_t din = r.d_in, dout = r.d_out;
    switch (r.kind) {
    case RecordKind::linear:
    case RecordKind::conv1d:
        if (kind == ContainerKind::adapter) {
            const std::size_t re = std::min<std::size_t>(rank, std::min(din, dout));
            return {re * din, dout * re};
        }
        return {dout * din, dout};
    case RecordKind::embedding:
    case RecordKind::tensor:
        return {din * dout, 0};
    }
    throw FormatError("unknown record kind " + std::to_string(static_cast<int>(r.kind)));
}

std::string encode(const Container& c) {
    Writer w;
    w.raw(std::string_view(kMagic, 4));
    w.u16(kFormatVersion);
    w.raw(kind_tag(c.kind));
    w.u8(static_cast<std::uint8_t>(c.scheme));
    w.u16(c.rank);
    w.f32(c.alpha);
    w.str16(c.name, "name");
    w.u32(static_cast<std::uint32_t>(c.records.size()));
    for (const Record& r : c.records) {
        const auto [na, nb] = payload_lengths(c.kind, c.rank, r);
        if (r.a.size() != na || r.b.size() != nb) {
            throw FormatError("record '" + r.path + "' payload sizes " + std::to_string(r.a.size()) + "/" +
                              std::to_string(r.b.size()) + " do not match header-implied " + std::to_string(na) +
                              "/" + std::to_string(nb));
        }
        w.str16(r.path, "record path");
        w.u8(static_cast<std::uint8_t>(r.kind));
        w.u32(r.d_in);
        w.u32(r.d_out);
        for (float f : r.a) w.f32(f);
        for (float f : r.b) w.f32(f);
    }
    const std::uint32_t crc = crc_of(w.bytes());
    w.u32(crc);
    return std::move(w.bytes());
}

Container decode(std::string_view bytes) {
    Reader head(bytes);
    if (head.raw(4, "magic") != std::string_view(kMagic, 4)) throw FormatError("bad magic: not an EELA container");
    const std::uint16_t version = head.u16("version");
    if (version != kFormatVersion) throw FormatError("unsupported EELA version " + std::to_string(version));
    if (bytes.size() < 4 + 2 + 4 + 4) throw FormatError("truncated container");
    const std::string_view body = bytes.substr(0, bytes.size() - 4);
    Reader tail(bytes.substr(bytes.size() - 4));
    if (tail.u32("crc") != crc_of(body)) throw FormatError("CRC mismatch: container is corrupt or truncated");

    Reader in(body);
    in.raw(6, "header");
    const std::string_view tag = in.raw(4, "kind tag");
    Container c;
    if (tag == "ADPT") c.kind = ContainerKind::adapter;
    else if (tag == "BASE") c.kind = ContainerKind::base;
    else if (tag == "CORP") c.kind = ContainerKind::corpus;
    else throw FormatError("unknown kind tag '" + std::string(tag) + "'");
    c.scheme = static_cast<char>(in.u8("scheme id"));
    c.rank = in.u16("rank");
    c.alpha = in.f32("alpha");
    c.name = in.str16("name");
    const std::uint32_t count = in.u32("record count");
    for (std::uint32_t i = 0; i < count; ++i) {
        Record r;
        r.path = in.str16("record path");
        const std::uint8_t kind = in.u8("record kind");
        if (kind > 3) throw FormatError("record '" + r.path + "' has unknown kind " + std::to_string(kind));
        r.kind = static_cast<RecordKind>(kind);
        r.d_in = in.u32("d_in");
        r.d_out = in.u32("d_out");
        const auto [na, nb] = payload_lengths(c.kind, c.rank, r);
        in.floats(r.a, na, "payload A");
        in.floats(r.b, nb, "payload B");
        c.records.push_back(std::move(r));
    }
    if (!in.done()) throw FormatError("trailing bytes after last record");
    return c;
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw InputError("cannot open '" + path.string() + "' for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw InputError("failed writing '" + path.string() + "'");
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw InputError("cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

std::string NameField::encode() const {
    std::string s = label;
    for (const auto& [k, v] : meta) s += ";" + k + "=" + v;
    return s;
}

NameField NameField::parse(std::string_view text) {
    NameField nf;
    std::size_t pos = text.find(';');
    nf.label = std::string(text.substr(0, pos));
    while (pos != std::string_view::npos) {
        const std::size_t next = text.find(';', pos + 1);
        const std::string_view item = text.substr(pos + 1, next == std::string_view::npos ? next : next - pos - 1);
        const std::size_t eq = item.find('=');
        if (eq == std::string_view::npos) throw FormatError("malformed name metadata '" + std::string(item) + "'");
        nf.meta.emplace_back(std::string(item.substr(0, eq)), std::string(item.substr(eq + 1)));
        pos = next;
    }
    return nf;
}

std::optional<std::string> NameField::get(std::string_view key) const {
    for (const auto& [k, v] : meta) {
        if (k == key) return v;
    }
    return std::nullopt;
}

// ---------------------------------------------------------------------------

std::size_t AdapterBundle::param_count() const {
    std::size_t n = 0;
    for (const auto& r : records) n += r.a.size() + r.b.size();
    return n;
}

bool bitwise_equal(const AdapterBundle& x, const AdapterBundle& y) {
    if (x.name != y.name || x.scheme != y.scheme || x.rank != y.rank ||
        std::bit_cast<std::uint32_t>(x.alpha) != std::bit_cast<std::uint32_t>(y.alpha) ||
        x.base_checksum != y.base_checksum || x.records.size() != y.records.size()) {
        return false;
    }
    for (std::size_t i = 0; i < x.records.size(); ++i) {
        const auto& a = x.records[i];
        const auto& b = y.records[i];
        if (a.path != b.path || a.kind != b.kind || a.d_in_eff != b.d_in_eff || a.d_out_eff != b.d_out_eff ||
            !a.a.bitwise_equal(b.a) || !a.b.bitwise_equal(b.b)) {
            return false;
        }
    }
    return true;
}

AdapterBundle extract_bundle(const ToyModel& model, std::string name, char scheme_id, int rank, float alpha) {
    AdapterBundle bundle;
    bundle.name = std::move(name);
    bundle.scheme = scheme_id;
    bundle.rank = rank;
    bundle.alpha = alpha;
    bundle.base_checksum = model.base_checksum();
    for (const auto& [path, layer] : model.layers()) {
        if (!layer->adapted()) continue;
        const LoraPair& p = *layer->lora();
        if (p.merged) throw StateError("extract_bundle: adapter on '" + path + "' is merged");
        bundle.records.push_back(AdapterRecord{path, layer->kind(), static_cast<std::uint32_t>(layer->d_in_eff()),
                                               static_cast<std::uint32_t>(layer->d_out_eff()), p.a.value,
                                               p.b.value});
    }
    return bundle;
}

void attach_bundle(ToyModel& model, const AdapterBundle& bundle) {
    if (model.has_adapters()) throw StateError("attach_bundle: model already carries adapters");
    const std::uint32_t crc = model.base_checksum();
    if (crc != bundle.base_checksum) {
        throw CompatibilityError("adapter '" + bundle.name + "' was trained against base " +
                                 hex32(bundle.base_checksum) + " but this base is " + hex32(crc));
    }
    for (const auto& r : bundle.records) {
        if (!model.has_layer(r.path)) {
            throw CompatibilityError("adapter '" + bundle.name + "' targets unknown layer '" + r.path + "'");
        }
        const AdaptableLayer& l = model.layer(r.path);
        if (l.kind() != r.kind || l.d_in_eff() != r.d_in_eff || l.d_out_eff() != r.d_out_eff) {
            throw CompatibilityError("adapter '" + bundle.name + "' layer '" + r.path + "' shape does not match model");
        }
    }
    try {
        for (const auto& r : bundle.records) {
            const int re = effective_rank(bundle.rank, r.d_in_eff, r.d_out_eff);
            model.layer(r.path).attach(r.a, r.b, re, effective_alpha(bundle.alpha, bundle.rank, re));
        }
    } catch (...) {
        detach_all(model);
        throw;
    }
}

Container to_container(const AdapterBundle& bundle) {
    Container c;
    c.kind = ContainerKind::adapter;
    c.scheme = bundle.scheme;
    if (bundle.rank < 1 || bundle.rank > 0xFFFF) throw FormatError("bundle rank out of u16 range");
    c.rank = static_cast<std::uint16_t>(bundle.rank);
    c.alpha = bundle.alpha;
    c.name = NameField{bundle.name, {{"base_crc", hex32(bundle.base_checksum)}}}.encode();
    for (const auto& r : bundle.records) {
        c.records.push_back(Record{r.path, r.kind == LayerKind::linear ? RecordKind::linear : RecordKind::conv1d,
                                   r.d_in_eff, r.d_out_eff, r.a.data(), r.b.data()});
    }
    return c;
}

AdapterBundle bundle_from_container(const Container& c) {
    if (c.kind != ContainerKind::adapter) throw FormatError("container is not an adapter bundle");
    if (!is_scheme_id(c.scheme)) throw FormatError(std::string("bundle has invalid scheme id '") + c.scheme + "'");
    const NameField nf = NameField::parse(c.name);
    AdapterBundle b;
    b.name = nf.label;
    b.scheme = c.scheme;
    b.rank = c.rank;
    b.alpha = c.alpha;
    const auto crc = nf.get("base_crc");
    if (!crc) throw FormatError("bundle name field lacks base_crc");
    b.base_checksum = parse_hex32(*crc);
    for (const Record& r : c.records) {
        if (r.kind != RecordKind::linear && r.kind != RecordKind::conv1d) {
            throw FormatError("adapter record '" + r.path + "' has non-layer kind");
        }
        const std::size_t re = std::min<std::size_t>(c.rank, std::min(r.d_in, r.d_out));
        b.records.push_back(AdapterRecord{r.path, r.kind == RecordKind::linear ? LayerKind::linear : LayerKind::conv1d,
                                          r.d_in, r.d_out, Tensor({re, r.d_in}, r.a), Tensor({r.d_out, re}, r.b)});
    }
    return b;
}

void save_bundle(const AdapterBundle& bundle, const std::filesystem::path& path) {
    write_file(path, encode(to_container(bundle)));
}

AdapterBundle load_bundle(const std::filesystem::path& path) { return bundle_from_container(decode(read_file(path))); }

// ---------------------------------------------------------------------------

Container base_to_container(const ToyModel& model) {
    const ModelConfig& cfg = model.config();
    Container c;
    c.kind = ContainerKind::base;
    c.name = NameField{"base",
                       {{"pretrained", model.pretrained() ? "1" : "0"},
                        {"vocab", std::to_string(cfg.vocab)},
                        {"hidden", std::to_string(cfg.hidden)},
                        {"out_dim", std::to_string(cfg.out_dim)},
                        {"flow_layers", std::to_string(cfg.flow_layers)},
                        {"kernel", std::to_string(cfg.kernel)},
                        {"max_duration", std::to_string(cfg.max_duration)},
                        {"pos_channels", std::to_string(cfg.pos_channels)}}}
                 .encode();
    c.records.push_back(Record{"text_encoder.embedding", RecordKind::embedding,
                               static_cast<std::uint32_t>(cfg.vocab), static_cast<std::uint32_t>(cfg.hidden),
                               model.embedding().value.data(), {}});
    for (const auto& [path, l] : model.layers()) {
        c.records.push_back(Record{path, l->kind() == LayerKind::linear ? RecordKind::linear : RecordKind::conv1d,
                                   static_cast<std::uint32_t>(l->d_in_eff()), static_cast<std::uint32_t>(l->d_out_eff()),
                                   l->weight().value.data(), l->bias().value.data()});
    }
    return c;
}

ToyModel base_from_container(const Container& c) {
    if (c.kind != ContainerKind::base) throw FormatError("container is not a base checkpoint");
    const NameField nf = NameField::parse(c.name);
    ModelConfig cfg;
    auto field = [&](const char* key, int& dst) {
        const auto v = nf.get(key);
        if (!v) throw FormatError(std::string("base checkpoint lacks '") + key + "'");
        dst = parse_int(*v, key);
    };
    field("vocab", cfg.vocab);
    field("hidden", cfg.hidden);
    field("out_dim", cfg.out_dim);
    field("flow_layers", cfg.flow_layers);
    field("kernel", cfg.kernel);
    field("max_duration", cfg.max_duration);
    field("pos_channels", cfg.pos_channels);
    try {
        cfg.validate();
    } catch (const ConfigError& e) {
        throw FormatError(std::string("base checkpoint: ") + e.what());
    }
    ToyModel m = ToyModel::create(cfg, 0);
    const auto layers = m.layers();
    if (c.records.size() != layers.size() + 1) {
        throw FormatError("base checkpoint has " + std::to_string(c.records.size()) + " records, expected " +
                          std::to_string(layers.size() + 1));
    }
    const Record& emb = c.records[0];
    if (emb.kind != RecordKind::embedding || emb.a.size() != m.embedding().size()) {
        throw FormatError("base checkpoint embedding record does not match config");
    }
    m.embedding().value.data() = emb.a;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const Record& r = c.records[i + 1];
        AdaptableLayer& l = *layers[i].second;
        if (r.path != layers[i].first || r.d_in != l.d_in_eff() || r.d_out != l.d_out_eff()) {
            throw FormatError("base checkpoint record '" + r.path + "' does not match layer '" + layers[i].first + "'");
        }
        l.weight().value.data() = r.a;
        l.bias().value.data() = r.b;
    }
    m.set_pretrained(nf.get("pretrained").value_or("0") == "1");
    if (m.pretrained()) m.set_base_trainable(false);
    return m;
}

void save_base(const ToyModel& model, const std::filesystem::path& path) {
    write_file(path, encode(base_to_container(model)));
}

ToyModel load_base(const std::filesystem::path& path) { return base_from_container(decode(read_file(path))); }

// ---------------------------------------------------------------------------

void AdapterRegistry::add(AdapterBundle bundle) {
    std::string key = bundle.name;
    bundles_.insert_or_assign(std::move(key), std::move(bundle));
}

bool AdapterRegistry::contains(std::string_view name) const { return bundles_.find(name) != bundles_.end(); }

const AdapterBundle& AdapterRegistry::get(std::string_view name) const {
    const auto it = bundles_.find(name);
    if (it == bundles_.end()) throw LookupError("no adapter named '" + std::string(name) + "' in registry");
    return it->second;
}

std::vector<std::string> AdapterRegistry::names() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : bundles_) out.push_back(k);
    return out;
}

void AdapterRegistry::swap(ToyModel& model, std::optional<std::string> name) {
    if (name) {
        const AdapterBundle& next = get(*name);
        if (next.base_checksum != model.base_checksum()) {
            throw CompatibilityError("adapter '" + *name + "' was trained against a different base");
        }
    }
    if (attached_) {
        detach_all(model);
        attached_.reset();
    } else if (model.has_adapters()) {
        throw StateError("swap: model carries adapters the registry did not attach");
    }
    if (name) {
        attach_bundle(model, get(*name));
        attached_ = std::move(name);
    }
}

} // namespace emolora
