#include "drc/checkpoint.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "drc/config.hpp"

namespace drc {

namespace {

void put_u64(std::ostream& os, u64 v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

u64 get_u64(std::istream& is) {
    u64 v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    return v;
}

void put_i64(std::ostream& os, i64 v) { put_u64(os, static_cast<u64>(v)); }
i64 get_i64(std::istream& is) { return static_cast<i64>(get_u64(is)); }

void put_string(std::ostream& os, const std::string& s) {
    put_u64(os, s.size());
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& is) {
    const u64 n = get_u64(is);
    std::string s(n, '\0');
    is.read(s.data(), static_cast<std::streamsize>(n));
    return s;
}

void put_tensor(std::ostream& os, const Tensor& t) {
    put_u64(os, static_cast<u64>(t.numel()));
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.numel() * static_cast<i64>(sizeof(double))));
}

void get_tensor(std::istream& is, Tensor& t) {
    const u64 n = get_u64(is);
    if (n != static_cast<u64>(t.numel()))
        throw IoError("checkpoint: tensor size mismatch (architecture changed?)");
    is.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.numel() * static_cast<i64>(sizeof(double))));
}

}  // namespace

void CheckpointCodec::save(const std::string& path, const Trainer& trainer) {
    std::ostringstream os(std::ios::binary);
    os.write(magic, sizeof(magic));
    put_u64(os, version);
    put_u64(os, trainer.config_hash_);
    put_string(os, trainer.config_json_);
    put_i64(os, trainer.iter_);
    put_i64(os, trainer.n_examples_);
    {
        std::ostringstream rs;
        trainer.rng_.save(rs);
        put_string(os, rs.str());
    }
    put_i64(os, trainer.sched_.epoch());
    put_i64(os, trainer.sched_.cursor());

    auto groups = const_cast<Trainer&>(trainer).model_.parameter_groups();
    put_u64(os, groups.size());
    for (auto& g : groups) {
        put_u64(os, g.size());
        for (auto& t : g) put_tensor(os, t);
    }
    for (const auto& opt : trainer.optimizers_) {
        std::ostringstream as(std::ios::binary);
        opt.save(as);
        put_string(os, as.str());
    }
    {
        std::ostringstream cs(std::ios::binary);
        trainer.chains_.save(cs);
        put_string(os, cs.str());
    }

    const std::string tmp = path + ".tmp";
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw IoError("checkpoint: cannot open " + tmp);
    const std::string blob = os.str();
    f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    f.close();
    if (!f) throw IoError("checkpoint: write failed for " + tmp);
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("checkpoint: cannot move " + tmp + " to " + path);
}

std::string CheckpointCodec::read_config_json(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("checkpoint: cannot open " + path);
    char m[sizeof(magic)];
    f.read(m, sizeof(m));
    if (!f || std::memcmp(m, magic, sizeof(magic)) != 0)
        throw IoError("checkpoint: bad magic in " + path);
    const u64 ver = get_u64(f);
    if (ver != version)
        throw IoError("checkpoint: unsupported format version " + std::to_string(ver));
    get_u64(f);  // hash
    return get_string(f);
}

Trainer CheckpointCodec::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("checkpoint: cannot open " + path);
    char m[sizeof(magic)];
    f.read(m, sizeof(m));
    if (!f || std::memcmp(m, magic, sizeof(magic)) != 0)
        throw IoError("checkpoint: bad magic in " + path);
    const u64 ver = get_u64(f);
    if (ver != version)
        throw IoError("checkpoint: unsupported format version " + std::to_string(ver));
    const u64 hash = get_u64(f);
    const std::string config_json = get_string(f);
    const i64 iter = get_i64(f);
    const i64 n_examples = get_i64(f);
    const std::string rng_state = get_string(f);
    const i64 sched_epoch = get_i64(f);
    const i64 sched_cursor = get_i64(f);

    // Rebuild the trainer from the embedded config, then overwrite state.
    Trainer trainer = trainer_from_config_json(config_json, n_examples, hash);

    const u64 n_groups = get_u64(f);
    auto groups = trainer.model_.parameter_groups();
    if (n_groups != groups.size()) throw IoError("checkpoint: parameter group count mismatch");
    for (auto& g : groups) {
        const u64 count = get_u64(f);
        if (count != g.size()) throw IoError("checkpoint: parameter count mismatch");
        for (auto& t : g) get_tensor(f, t);
    }
    for (auto& opt : trainer.optimizers_) {
        std::istringstream as(get_string(f), std::ios::binary);
        opt.load(as);
    }
    {
        std::istringstream cs(get_string(f), std::ios::binary);
        trainer.chains_.load(cs);
    }
    if (!f) throw IoError("checkpoint: truncated file " + path);

    std::istringstream rs(rng_state);
    trainer.rng_.load(rs);
    trainer.iter_ = iter;
    trainer.sched_.restore(sched_epoch, sched_cursor);
    return trainer;
}

}  // namespace drc
