#pragma once

#include "pfda/harness.hpp"

#include <set>
#include <string>

namespace pfda::detail {

/// Tracks which keys of a JSON object were read so leftovers can be rejected.
class Params {
public:
    Params(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j_.is_object()) throw Error(ErrorCode::ConfigInvalid, where_ + " must be an object");
    }

    bool has(const std::string& key) {
        used_.insert(key);
        return j_.contains(key);
    }

    template <class T>
    T get(const std::string& key, T fallback) {
        if (!has(key)) return fallback;
        try {
            return j_.at(key).get<T>();
        } catch (const nlohmann::json::exception&) {
            throw Error(ErrorCode::ConfigInvalid, where_ + "." + key + " has the wrong type");
        }
    }

    const Json& raw(const std::string& key) {
        used_.insert(key);
        return j_.at(key);
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!used_.count(it.key())) throw Error(ErrorCode::ConfigInvalid, "unknown key " + where_ + "." + it.key());
    }

private:
    Json j_;
    std::string where_;
    std::set<std::string> used_;
};

}  // namespace pfda::detail
