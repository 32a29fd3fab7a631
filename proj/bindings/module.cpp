#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "sinkattn/checkpoint.hpp"
#include "sinkattn/data.hpp"
#include "sinkattn/eval.hpp"
#include "sinkattn/kvcache.hpp"
#include "sinkattn/masks.hpp"
#include "sinkattn/model.hpp"

namespace py = pybind11;
using namespace sinkattn;

namespace {

py::array_t<double> tensor_to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy(t.data(), t.data() + t.numel(), out.mutable_data());
  return out;
}

py::array_t<bool> mask_to_array(const AttentionMask& m) {
  py::array_t<bool> out({m.n, m.n});
  for (std::size_t i = 0; i < m.n * m.n; ++i) out.mutable_data()[i] = m.allowed[i] != 0;
  return out;
}

PatternSpec make_pattern(const std::string& kind, std::size_t group_size, std::size_t num_sink,
                         std::size_t stride, std::size_t random_k, std::uint64_t seed) {
  PatternSpec spec;
  spec.kind = pattern_kind_from_name(kind);
  spec.group_size = group_size;
  spec.num_sink = num_sink;
  spec.stride = stride;
  spec.random_k = random_k;
  spec.seed = seed;
  return spec;
}

AttnMode make_mode(const std::string& kind, const PatternSpec& pattern, std::size_t n_heads,
                   std::size_t group_size) {
  if (kind == "roll") return AttnMode::roll_based(group_size);
  if (kind == "mask") return AttnMode::mask_based(pattern, n_heads);
  throw ConfigError("attn mode must be 'mask' or 'roll'");
}

// Owning wrapper so python holds the model, optimizer and mode together.
struct PyModel {
  DecoderModel model;
  AdamState opt;

  explicit PyModel(const ModelConfig& cfg) : model(init_model(cfg)) {}
  explicit PyModel(DecoderModel m) : model(std::move(m)) {}
};

struct PyDecodeSession {
  const PyModel& owner;
  KVCache cache;

  PyDecodeSession(const PyModel& m, const EvictionPolicy& policy)
      : owner(m), cache(make_cache(m.model.config, policy)) {}
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Sparse sink attention toolkit: masks, toy decoder, LoRA, KV eviction";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<sinkattn::IndexError>(m, "TokenIndexError", PyExc_IndexError);
  py::register_exception<StateError>(m, "StateError", PyExc_RuntimeError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);

  py::class_<PatternSpec>(m, "PatternSpec")
      .def(py::init(&make_pattern), py::arg("kind"), py::arg("group_size") = 0,
           py::arg("num_sink") = 0, py::arg("stride") = 0, py::arg("random_k") = 0,
           py::arg("seed") = 0)
      .def_readonly("group_size", &PatternSpec::group_size)
      .def_readonly("num_sink", &PatternSpec::num_sink)
      .def("__repr__", [](const PatternSpec& s) {
        return "PatternSpec(" + pattern_kind_name(s.kind) + ")";
      });

  m.def(
      "build_mask",
      [](const PatternSpec& spec, std::size_t n) { return mask_to_array(build_mask(spec, n)); },
      py::arg("spec"), py::arg("n"));
  m.def("mask_nnz",
        [](const PatternSpec& spec, std::size_t n) { return nnz(build_mask(spec, n)); });
  m.def("roll_mask_oracle", [](std::size_t n, std::size_t w, std::size_t n_heads) {
    std::vector<py::array_t<bool>> out;
    for (const AttentionMask& mask : roll_mask_oracle(n, w, n_heads)) {
      out.push_back(mask_to_array(mask));
    }
    return out;
  });

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init([](std::size_t vocab_size, std::size_t d_model, std::size_t n_heads,
                       std::size_t n_layers, std::size_t d_ff, std::size_t max_positions,
                       double rope_theta, double pos_interp_factor, std::uint64_t seed) {
             ModelConfig c;
             c.vocab_size = vocab_size;
             c.d_model = d_model;
             c.n_heads = n_heads;
             c.n_layers = n_layers;
             c.d_ff = d_ff;
             c.max_positions = max_positions;
             c.rope_theta = rope_theta;
             c.pos_interp_factor = pos_interp_factor;
             c.seed = seed;
             c.validate();
             return c;
           }),
           py::arg("vocab_size") = 256, py::arg("d_model") = 128, py::arg("n_heads") = 8,
           py::arg("n_layers") = 4, py::arg("d_ff") = 256, py::arg("max_positions") = 512,
           py::arg("rope_theta") = 10000.0, py::arg("pos_interp_factor") = 1.0,
           py::arg("seed") = 0)
      .def_readonly("vocab_size", &ModelConfig::vocab_size)
      .def_readonly("d_model", &ModelConfig::d_model)
      .def_readonly("n_heads", &ModelConfig::n_heads)
      .def_readonly("n_layers", &ModelConfig::n_layers);

  py::class_<EvictionPolicy>(m, "EvictionPolicy")
      .def_static("full", &EvictionPolicy::full)
      .def_static("local", &EvictionPolicy::local, py::arg("window"))
      .def_static("h2o", &EvictionPolicy::h2o, py::arg("budget"), py::arg("recent"))
      .def_static("sink", &EvictionPolicy::sink, py::arg("g"), py::arg("window"));

  py::class_<PyModel>(m, "Model")
      .def(py::init<const ModelConfig&>(), py::arg("config"))
      .def_property_readonly("config", [](const PyModel& s) { return s.model.config; })
      .def_property_readonly("parameter_count",
                             [](const PyModel& s) { return s.model.parameter_count(); })
      .def(
          "forward",
          [](const PyModel& s, const std::vector<int>& tokens, const std::string& mode,
             const PatternSpec& pattern, std::size_t group_size) {
            return tensor_to_array(forward(
                s.model, tokens,
                make_mode(mode, pattern, s.model.config.n_heads, group_size)));
          },
          py::arg("tokens"), py::arg("mode") = "mask",
          py::arg("pattern") = make_pattern("full_causal", 0, 0, 0, 0, 0),
          py::arg("group_size") = 0)
      .def(
          "train_step",
          [](PyModel& s, const std::vector<std::vector<int>>& batch, double lr,
             const std::string& mode, const PatternSpec& pattern, std::size_t group_size) {
            return train_step(s.model, batch,
                              make_mode(mode, pattern, s.model.config.n_heads, group_size), s.opt,
                              lr);
          },
          py::arg("batch"), py::arg("lr") = 3e-4, py::arg("mode") = "mask",
          py::arg("pattern") = make_pattern("full_causal", 0, 0, 0, 0, 0),
          py::arg("group_size") = 0)
      .def("attach_lora",
           [](PyModel& s, const std::string& targets, std::size_t rank, double alpha,
              bool train_embeddings, bool train_norms) {
             TrainabilityPolicy policy;
             policy.embeddings = train_embeddings;
             policy.norms = train_norms;
             attach_lora(s.model, targets, rank, alpha, policy, s.model.config.seed);
           },
           py::arg("targets") = "qkvo", py::arg("rank") = 8, py::arg("alpha") = 16.0,
           py::arg("train_embeddings") = true, py::arg("train_norms") = true)
      .def("merge_lora", [](PyModel& s) { merge_lora(s.model); })
      .def("save", [](const PyModel& s, const std::string& path) {
        save_checkpoint(path, s.model, &s.opt);
      })
      .def_static("load", [](const std::string& path) {
        LoadedCheckpoint ck = load_checkpoint(path);
        auto out = std::make_unique<PyModel>(std::move(ck.model));
        out->opt = std::move(ck.opt);
        return out;
      });

  py::class_<PyDecodeSession>(m, "DecodeSession")
      .def(py::init<const PyModel&, const EvictionPolicy&>(), py::arg("model"),
           py::arg("policy"), py::keep_alive<1, 2>())
      .def("step",
           [](PyDecodeSession& s, int token) {
             const auto logits = decode_step(s.owner.model, s.cache, token);
             py::array_t<double> out(static_cast<py::ssize_t>(logits.size()));
             std::copy(logits.begin(), logits.end(), out.mutable_data());
             return out;
           })
      .def("generate",
           [](PyDecodeSession& s, const std::vector<int>& prompt, std::size_t n_new) {
             return greedy_generate(s.owner.model, s.cache, prompt, n_new);
           })
      .def("stats", [](const PyDecodeSession& s) {
        const CacheStats st = cache_stats(s.cache);
        py::dict d;
        d["size"] = st.size;
        d["retained_score_mass"] = st.retained_score_mass;
        d["evicted_count"] = st.evicted_count;
        return d;
      });

  m.def(
      "perplexity",
      [](const PyModel& model, const std::vector<int>& stream, std::size_t context_len,
         std::size_t stride) {
        const PplReport r = perplexity(model.model, stream, context_len, stride);
        py::dict d;
        d["context_length"] = r.context_length;
        d["stride"] = r.stride;
        d["nll"] = r.nll;
        d["token_count"] = r.token_count;
        d["perplexity"] = r.perplexity;
        return d;
      },
      py::arg("model"), py::arg("stream"), py::arg("context_len"), py::arg("stride"));

  m.def("passkey_gen", [](std::size_t m_fill, std::size_t n_fill, std::uint64_t seed) {
    const PasskeyDoc doc = passkey_gen(m_fill, n_fill, seed);
    py::dict d;
    d["text"] = doc.text;
    d["tokens"] = doc.tokens;
    d["passkey"] = doc.passkey;
    return d;
  });
  m.def("passkey_score", [](const std::string& generated, int passkey) {
    PasskeyDoc doc;
    doc.passkey = passkey;
    return passkey_score(generated, doc);
  });

  m.def("encode_bytes", [](const std::string& text) { return encode_bytes(text); });
  m.def("decode_bytes", &decode_bytes);
  m.def("generate_corpus_text", &generate_corpus_text, py::arg("seed"), py::arg("min_bytes"));
  m.def("make_copy_sequence", &make_copy_sequence, py::arg("seed"), py::arg("prefix_len"),
        py::arg("filler_len"), py::arg("vocab"));
}
