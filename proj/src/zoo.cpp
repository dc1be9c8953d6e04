#include "amalgam/zoo.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <atomic>
#include <bit>
#include <fstream>
#include <map>
#include <sstream>
#include <thread>

namespace amalgam {

namespace fs = std::filesystem;

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (auto b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
    }
    return h;
}

namespace {

constexpr std::uint8_t kDtypeF64 = 1;
constexpr std::size_t kHeaderBytes = 4 + 4 + 1;
constexpr std::size_t kChecksumBytes = 8;

class Writer {
public:
    void bytes(const void* p, std::size_t n) {
        auto b = static_cast<const std::uint8_t*>(p);
        out_.insert(out_.end(), b, b + n);
    }
    template <class T>
    void le(T v) {
        for (std::size_t i = 0; i < sizeof(T); ++i) out_.push_back(static_cast<std::uint8_t>(static_cast<std::uint64_t>(v) >> (8 * i)));
    }
    void f64(double v) { le(std::bit_cast<std::uint64_t>(v)); }
    std::vector<std::uint8_t>& buffer() { return out_; }

private:
    std::vector<std::uint8_t> out_;
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

    template <class T>
    T le() {
        need(sizeof(T));
        std::uint64_t v = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(in_[pos_ + i]) << (8 * i);
        pos_ += sizeof(T);
        return static_cast<T>(v);
    }
    double f64() { return std::bit_cast<double>(le<std::uint64_t>()); }
    std::string str(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == in_.size(); }

private:
    void need(std::size_t n) const {
        if (pos_ + n > in_.size()) fail(ErrorKind::format, "container ends unexpectedly");
    }
    std::span<const std::uint8_t> in_;
    std::size_t pos_ = 0;
};

std::vector<std::string> split_on(const std::string& s, char sep) {
    std::vector<std::string> parts;
    std::string cur;
    std::istringstream is(s);
    while (std::getline(is, cur, sep)) parts.push_back(cur);
    if (!s.empty() && s.back() == sep) parts.emplace_back();
    return parts;
}

std::string join(const std::vector<std::string>& parts, char sep) {
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i) out += sep;
        out += parts[i];
    }
    return out;
}

std::size_t parse_size(const std::string& s) {
    try {
        std::size_t used = 0;
        const auto v = std::stoull(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
        fail(ErrorKind::format, "expected an unsigned integer, got '" + s + "'");
    }
}

std::vector<std::size_t> parse_sizes(const std::string& s) {
    std::vector<std::size_t> out;
    if (s.empty()) return out;
    for (const auto& p : split_on(s, ',')) out.push_back(parse_size(p));
    return out;
}

std::map<std::string, std::string> parse_kv(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) fail(ErrorKind::format, "malformed spec line '" + line + "'");
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return kv;
}

const std::string& require(const std::map<std::string, std::string>& kv, const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) fail(ErrorKind::format, "spec block lacks '" + key + "'");
    return it->second;
}

void write_file_atomic(const fs::path& path, std::span<const std::uint8_t> bytes) {
    static std::atomic<std::uint64_t> counter{0};
    const fs::path tmp = path.string() + ".tmp." + std::to_string(::getpid()) + "." + std::to_string(counter++);
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) fail(ErrorKind::io, "cannot open " + tmp.string() + " for writing");
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) fail(ErrorKind::io, "write to " + tmp.string() + " failed");
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) {
        fs::remove(tmp, ec);
        fail(ErrorKind::io, "cannot move checkpoint into place at " + path.string());
    }
}

std::vector<std::uint8_t> read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::io, "cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) fail(ErrorKind::io, "read from " + path.string() + " failed");
    return bytes;
}

const Tensor& find_tensor(const Container& c, const std::string& name) {
    for (const auto& t : c.tensors) {
        if (t.name == name) return t.tensor;
    }
    fail(ErrorKind::format, "container has no tensor '" + name + "'");
}

void expect_kind(const Container& c, ContainerKind kind, const char* what) {
    if (c.kind != kind) fail(ErrorKind::format, std::string("container does not hold a ") + what);
}

}  // namespace

std::vector<std::uint8_t> encode_container(const Container& c) {
    Writer w;
    w.bytes("AMLG", 4);
    w.le<std::uint32_t>(kContainerVersion);
    w.le<std::uint8_t>(static_cast<std::uint8_t>(c.kind));
    w.le<std::uint32_t>(static_cast<std::uint32_t>(c.spec_text.size()));
    w.bytes(c.spec_text.data(), c.spec_text.size());
    w.le<std::uint32_t>(static_cast<std::uint32_t>(c.tensors.size()));
    for (const auto& [name, tensor] : c.tensors) {
        if (name.size() > 0xFFFF) fail(ErrorKind::format, "tensor name too long");
        w.le<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
        w.bytes(name.data(), name.size());
        w.le<std::uint8_t>(kDtypeF64);
        w.le<std::uint8_t>(static_cast<std::uint8_t>(tensor.rank()));
        for (auto d : tensor.shape()) w.le<std::uint64_t>(d);
        for (double v : tensor.data()) w.f64(v);
    }
    const std::uint64_t sum = fnv1a64(w.buffer());
    w.le<std::uint64_t>(sum);
    return std::move(w.buffer());
}

Container decode_container(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 4 || std::string(reinterpret_cast<const char*>(bytes.data()), 4) != "AMLG") {
        fail(ErrorKind::format, "not an AMLG container (bad magic)");
    }
    if (bytes.size() < kHeaderBytes + kChecksumBytes) fail(ErrorKind::corruption, "container truncated");
    const auto body = bytes.first(bytes.size() - kChecksumBytes);
    Reader tail(bytes.last(kChecksumBytes));
    if (tail.le<std::uint64_t>() != fnv1a64(body)) fail(ErrorKind::corruption, "container checksum mismatch");

    Reader r(body);
    r.str(4);
    const auto version = r.le<std::uint32_t>();
    if (version > kContainerVersion || version == 0) {
        fail(ErrorKind::version, "unsupported container version " + std::to_string(version));
    }
    Container c;
    const auto kind = r.le<std::uint8_t>();
    if (kind > static_cast<std::uint8_t>(ContainerKind::amalgam_state)) fail(ErrorKind::format, "unknown container kind");
    c.kind = static_cast<ContainerKind>(kind);
    c.spec_text = r.str(r.le<std::uint32_t>());
    const auto count = r.le<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = r.str(r.le<std::uint16_t>());
        if (r.le<std::uint8_t>() != kDtypeF64) fail(ErrorKind::format, "tensor '" + name + "' has an unknown dtype");
        const auto rank = r.le<std::uint8_t>();
        Shape shape;
        for (std::uint8_t d = 0; d < rank; ++d) shape.push_back(static_cast<std::size_t>(r.le<std::uint64_t>()));
        if (shape.empty()) fail(ErrorKind::format, "tensor '" + name + "' has rank 0");
        std::vector<double> data(numel(shape));
        for (auto& v : data) v = r.f64();
        c.tensors.push_back({std::move(name), Tensor(std::move(shape), std::move(data))});
    }
    if (!r.done()) fail(ErrorKind::format, "trailing bytes after tensor table");
    return c;
}

void save_container(const Container& c, const fs::path& path) { write_file_atomic(path, encode_container(c)); }

Container load_container(const fs::path& path) {
    const auto bytes = read_file(path);
    return decode_container(bytes);
}

std::string encode_spec(const BlockNetSpec& spec) {
    auto sizes = [](const auto& v) {
        std::vector<std::string> parts;
        for (auto x : v) parts.push_back(std::to_string(x));
        return join(parts, ',');
    };
    std::vector<std::string> heads, tasks;
    for (const auto& h : spec.heads) {
        heads.push_back(h.task_id + ":" + std::to_string(h.num_classes));
        tasks.push_back(h.task_id);
    }
    std::ostringstream os;
    os << "input_shape=" << sizes(spec.input_shape) << '\n'
       << "stem_channels=" << spec.stem_channels << '\n'
       << "block_channels=" << sizes(spec.block_channels) << '\n'
       << "block_strides=" << sizes(spec.block_strides) << '\n'
       << "heads=" << join(heads, ',') << '\n'
       << "tasks=" << join(tasks, ',') << '\n';
    return os.str();
}

BlockNetSpec decode_spec(const std::string& text) {
    const auto kv = parse_kv(text);
    BlockNetSpec spec;
    const auto input = parse_sizes(require(kv, "input_shape"));
    if (input.size() != 3) fail(ErrorKind::format, "input_shape needs 3 entries");
    spec.input_shape = {input[0], input[1], input[2]};
    spec.stem_channels = parse_size(require(kv, "stem_channels"));
    spec.block_channels = parse_sizes(require(kv, "block_channels"));
    spec.block_strides = parse_sizes(require(kv, "block_strides"));
    spec.heads.clear();
    const auto& heads = require(kv, "heads");
    if (!heads.empty()) {
        for (const auto& h : split_on(heads, ',')) {
            const auto colon = h.rfind(':');
            if (colon == std::string::npos) fail(ErrorKind::format, "malformed head '" + h + "'");
            spec.heads.push_back({h.substr(0, colon), parse_size(h.substr(colon + 1))});
        }
    }
    return spec;
}

void save_net(const BlockNet& net, const fs::path& path) {
    Container c{ContainerKind::net, encode_spec(net.spec()), {}};
    for (const auto& p : net.parameters()) c.tensors.push_back({p.name, p.tensor.detach()});
    save_container(c, path);
}

BlockNet load_net(const fs::path& path) {
    Container c = load_container(path);
    expect_kind(c, ContainerKind::net, "network");
    BlockNetSpec spec = decode_spec(c.spec_text);
    try {
        return BlockNet(std::move(spec), std::move(c.tensors));
    } catch (const Error& e) {
        fail(ErrorKind::format, std::string("checkpoint does not match its spec: ") + e.what());
    }
}

void save_dataset(const Dataset& data, const fs::path& path) {
    Container c;
    c.kind = ContainerKind::dataset;
    c.spec_text = "tasks=" + join(data.tasks, ',') + "\nsize=" + std::to_string(data.size()) + "\n";
    c.tensors.push_back({"images", data.images.detach()});
    const std::size_t n = data.size();
    std::vector<double> ids(n);
    for (std::size_t i = 0; i < n; ++i) ids[i] = std::bit_cast<double>(data.ids[i]);
    c.tensors.push_back({"ids", Tensor({n}, std::move(ids))});
    for (const auto& task : data.tasks) {
        const auto& labs = data.labels.at(task);
        c.tensors.push_back({"label." + task, Tensor({n}, std::vector<double>(labs.begin(), labs.end()))});
    }
    if (data.scenes.size() == n) {
        std::vector<double> rows;
        rows.reserve(n * 10);
        for (const auto& s : data.scenes) {
            rows.insert(rows.end(), {static_cast<double>(s.shape), s.radius, s.center_x, s.center_y, s.fill[0], s.fill[1],
                                     s.fill[2], s.background, s.noise, std::bit_cast<double>(s.noise_seed)});
        }
        c.tensors.push_back({"scenes", Tensor({n, 10}, std::move(rows))});
    }
    save_container(c, path);
}

Dataset load_dataset(const fs::path& path) {
    Container c = load_container(path);
    expect_kind(c, ContainerKind::dataset, "dataset");
    const auto kv = parse_kv(c.spec_text);
    Dataset d;
    const auto& tasks = require(kv, "tasks");
    if (!tasks.empty()) d.tasks = split_on(tasks, ',');
    const std::size_t n = parse_size(require(kv, "size"));
    d.images = find_tensor(c, "images");
    if (d.images.rank() != 4 || d.images.dim(0) != n) fail(ErrorKind::format, "image tensor does not match dataset size");
    for (double v : find_tensor(c, "ids").data()) d.ids.push_back(std::bit_cast<std::uint64_t>(v));
    if (d.ids.size() != n) fail(ErrorKind::format, "id table does not match dataset size");
    for (const auto& task : d.tasks) {
        const auto& t = find_tensor(c, "label." + task);
        if (t.numel() != n) fail(ErrorKind::format, "label table for '" + task + "' has the wrong length");
        auto& labs = d.labels[task];
        for (double v : t.data()) labs.push_back(static_cast<int>(v));
    }
    for (const auto& nt : c.tensors) {
        if (nt.name != "scenes") continue;
        const auto v = nt.tensor.data();
        for (std::size_t i = 0; i < n; ++i) {
            const double* r = v.data() + i * 10;
            Scene s;
            s.shape = static_cast<ShapeKind>(static_cast<int>(r[0]));
            s.radius = r[1];
            s.center_x = r[2];
            s.center_y = r[3];
            s.fill = {r[4], r[5], r[6]};
            s.background = r[7];
            s.noise = r[8];
            s.noise_seed = std::bit_cast<std::uint64_t>(r[9]);
            d.scenes.push_back(s);
        }
    }
    return d;
}

void save_amalgam_state(const AmalgamResult& result, const fs::path& path) {
    Container c;
    c.kind = ContainerKind::amalgam_state;
    std::ostringstream spec;
    spec << "teachers=" << result.bridges.size() << '\n';
    for (std::size_t t = 0; t < result.bridges.size(); ++t) {
        for (const auto& b : result.bridges[t]) {
            const std::string base = "fa.t" + std::to_string(t) + ".b" + std::to_string(b.block_index);
            c.tensors.push_back({base + ".teacher", b.teacher_fa.weight.detach()});
            c.tensors.push_back({base + ".student", b.student_fa.weight.detach()});
        }
    }
    for (const auto& s : result.scales) {
        c.tensors.push_back({"lambda.t" + std::to_string(s.teacher_index) + "." + s.task_id, s.lambda.detach()});
    }
    c.spec_text = spec.str();
    save_container(c, path);
}

AmalgamState load_amalgam_state(const fs::path& path) {
    Container c = load_container(path);
    expect_kind(c, ContainerKind::amalgam_state, "amalgamation state");
    AmalgamState state;
    state.bridges.resize(parse_size(require(parse_kv(c.spec_text), "teachers")));
    for (auto& nt : c.tensors) {
        const auto parts = split_on(nt.name, '.');
        if (parts.size() == 4 && parts[0] == "fa") {
            const auto t = parse_size(parts[1].substr(1));
            const auto b = parse_size(parts[2].substr(1));
            if (t >= state.bridges.size()) fail(ErrorKind::format, "bridge for unknown teacher");
            auto& list = state.bridges[t];
            if (list.size() <= b) list.resize(b + 1);
            list[b].block_index = b;
            FAWeights fa{nt.tensor, parts[3] == "teacher" ? BridgeSide::teacher : BridgeSide::student, b};
            (parts[3] == "teacher" ? list[b].teacher_fa : list[b].student_fa) = fa;
        } else if (parts.size() >= 3 && parts[0] == "lambda") {
            std::string task = nt.name.substr(parts[0].size() + parts[1].size() + 2);
            state.scales.push_back({parse_size(parts[1].substr(1)), task, nt.tensor});
        } else {
            fail(ErrorKind::format, "unexpected tensor '" + nt.name + "' in amalgamation state");
        }
    }
    return state;
}

// ---- registry -----------------------------------------------------------------------

const char* to_string(NetRole role) {
    switch (role) {
        case NetRole::source: return "source";
        case NetRole::component: return "component";
        case NetRole::target: return "target";
    }
    return "source";
}

NetRole parse_role(const std::string& text) {
    if (text == "source") return NetRole::source;
    if (text == "component") return NetRole::component;
    if (text == "target") return NetRole::target;
    fail(ErrorKind::format, "unknown net role '" + text + "'");
}

namespace {

std::vector<RegistryEntry> parse_index(const fs::path& path) {
    std::vector<RegistryEntry> out;
    if (!fs::exists(path)) return out;
    std::ifstream in(path);
    if (!in) fail(ErrorKind::io, "cannot read " + path.string());
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto fields = split_on(line, '\t');
        if (fields.size() != 4) fail(ErrorKind::format, "malformed index line '" + line + "'");
        RegistryEntry e{fields[0], fields[1], parse_role(fields[2]), {}};
        if (!fields[3].empty()) {
            for (const auto& t : split_on(fields[3], ',')) e.tasks.insert(t);
        }
        out.push_back(std::move(e));
    }
    return out;
}

std::string format_index(const std::vector<RegistryEntry>& entries) {
    std::string out;
    for (const auto& e : entries) {
        out += e.net_id + '\t' + e.relative_path + '\t' + to_string(e.role) + '\t' +
               join(std::vector<std::string>(e.tasks.begin(), e.tasks.end()), ',') + '\n';
    }
    return out;
}

// Exclusive advisory lock on the zoo directory's lock file.
class IndexLock {
public:
    explicit IndexLock(const fs::path& path) : fd_(::open(path.c_str(), O_RDWR | O_CREAT, 0644)) {
        if (fd_ < 0) fail(ErrorKind::io, "cannot open lock file " + path.string());
        if (::flock(fd_, LOCK_EX) != 0) {
            ::close(fd_);
            fail(ErrorKind::io, "cannot lock " + path.string());
        }
    }
    ~IndexLock() {
        ::flock(fd_, LOCK_UN);
        ::close(fd_);
    }
    IndexLock(const IndexLock&) = delete;
    IndexLock& operator=(const IndexLock&) = delete;

private:
    int fd_;
};

void check_field(const std::string& value, const char* what) {
    if (value.empty() || value.find_first_of("\t\n") != std::string::npos) {
        fail(ErrorKind::config, std::string(what) + " must be non-empty and free of tabs/newlines");
    }
}

}  // namespace

ZooRegistry::ZooRegistry(fs::path dir) : dir_(std::move(dir)) {
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec || !fs::is_directory(dir_)) fail(ErrorKind::io, "cannot create zoo directory " + dir_.string());
}

void ZooRegistry::register_net(const RegistryEntry& entry) {
    check_field(entry.net_id, "net_id");
    check_field(entry.relative_path, "path");
    for (const auto& t : entry.tasks) {
        if (t.empty() || t.find_first_of(",\t\n") != std::string::npos) fail(ErrorKind::config, "invalid task name '" + t + "'");
    }
    IndexLock lock(dir_ / "index.lock");
    auto current = parse_index(index_path());
    for (const auto& e : current) {
        if (e.net_id == entry.net_id) fail(ErrorKind::conflict, "net id '" + entry.net_id + "' already registered");
    }
    current.push_back(entry);
    const std::string text = format_index(current);
    write_file_atomic(index_path(), std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

RegistryEntry ZooRegistry::lookup(const std::string& net_id) const {
    for (auto& e : parse_index(index_path())) {
        if (e.net_id == net_id) return e;
    }
    fail(ErrorKind::not_found, "net id '" + net_id + "' is not registered");
}

std::vector<RegistryEntry> ZooRegistry::entries() const { return parse_index(index_path()); }

std::vector<std::string> ZooRegistry::list_by_task(const std::string& task) const {
    std::vector<std::string> ids;
    for (const auto& e : parse_index(index_path())) {
        if (e.tasks.contains(task)) ids.push_back(e.net_id);
    }
    return ids;
}

void ZooRegistry::verify() const {
    for (const auto& e : entries()) {
        const fs::path p = dir_ / e.relative_path;
        if (!fs::exists(p)) fail(ErrorKind::not_found, "checkpoint for '" + e.net_id + "' is missing: " + p.string());
        load_container(p);
    }
}

RegistryEntry ZooRegistry::add_net(const std::string& net_id, const BlockNet& net, NetRole role) {
    check_field(net_id, "net_id");
    RegistryEntry e{net_id, net_id + ".amlg", role, net.task_set()};
    save_net(net, dir_ / e.relative_path);
    register_net(e);
    return e;
}

BlockNet ZooRegistry::load(const std::string& net_id) const { return load_net(dir_ / lookup(net_id).relative_path); }

}  // namespace amalgam
