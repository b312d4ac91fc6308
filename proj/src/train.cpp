#include "lape/train.hpp"

#include "lape/binary_io.hpp"

namespace lape {

namespace {

template <typename S>
RunSummary run_at(const TrainConfig& c, const std::function<void(const std::string&)>& echo) {
  const std::filesystem::path dir(c.out_dir);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
  RunSummary run;
  run.metrics_path = dir / "metrics.log";
  run.checkpoint_path = dir / "model.ckpt";

  const DatasetSplit data = gen_dataset(c.data, c.seed);
  Model<S> m = init_model<S>(c.model, c.seed);
  std::string log = "strategy=" + to_string(c.model.joining) + " pe=" + to_string(c.model.pe_kind) +
                    " params=" + std::to_string(m.parameter_count()) + "\n";
  if (echo) echo(log.substr(0, log.size() - 1));
  io::write_file(run.metrics_path, log);
  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochMetrics& e) {
    const std::string line = format_epoch(e);
    log += line + "\n";
    io::write_file(run.metrics_path, log);
    if (echo) echo(line);
  };
  run.result = train_model(m, data.train, data.test, c, hooks);
  if (run.result.aborted) {
    log += "aborted: " + run.result.diagnostic + "\n";
    io::write_file(run.metrics_path, log);
  }
  save_checkpoint(make_checkpoint(m, c), run.checkpoint_path);
  return run;
}

}  // namespace

RunSummary run_training(const TrainConfig& c, const std::function<void(const std::string&)>& echo) {
  validate(c);
  if (c.model.precision == Precision::F64) return run_at<double>(c, echo);
  return run_at<float>(c, echo);
}

}  // namespace lape
