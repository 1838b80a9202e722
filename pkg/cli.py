"""
gqakit command line: convert / decode / bench / cost / train / uptrain / eval / report / rerun.

Results go to stdout, logs to stderr. Every written file gets a
<file>.manifest.json beside it; `rerun --manifest` replays the recorded argv.
"""

import argparse
import json
import logging
import os
import sys
import uuid
from typing import List, Optional, Sequence

# BLAS pools are sized when numpy loads; keep every run single-threaded
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np
import pandas as pd

from config import Config
from database.checkpoint_store import CheckpointStore
from metrics import MetricsCollector
from models.attention import AttentionConfig, Checkpoint
from models.decoder import generate
from models.tensor import Rng, derive_seed
from services.convert_service import ConversionMethod, ConversionService
from services.cost_service import BenchHarness, HardwareSpec, costs_to_dataframe, sweep_groups
from services.report_writer import RunManifest, ReportWriter, to_json
from services.train_service import (
    SyntheticTask, TaskKind, TrainingService, aggregate_runs, conversion_gap, eval_loss
)

TRAIN_SIDECAR_SUFFIX = ".train.json"

# Child-seed tags under --seed
SEED_MODEL = 0
SEED_CONVERT = 1
SEED_PROMPT = 2
SEED_UPTRAIN = 3


class UsageError(ValueError):
    """Raised for invalid command-line arguments."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def parse_int_list(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(',') if part.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of integers, got '{text}'") from None


def parse_auto_model(spec: str, groups: int = None, precision: str = None) -> AttentionConfig:
    """
    Parse 'H=8,dim=4,layers=2,vocab=64' into a model shape.

    Args:
        spec (str): Auto-model description
        groups (int): G, defaults to H
        precision (str): Precision, defaults to Config.PRECISION

    Returns:
        AttentionConfig: The model shape
    """
    fields = {}
    for part in spec.split(','):
        if '=' not in part:
            raise UsageError(f"bad --auto-model entry '{part}', expected key=value")
        key, value = part.split('=', 1)
        try:
            fields[key.strip()] = int(value)
        except ValueError:
            raise UsageError(f"bad --auto-model value '{part}'") from None
    missing = {'H', 'dim', 'layers', 'vocab'} - set(fields)
    if missing:
        raise UsageError(f"--auto-model is missing {sorted(missing)}")
    h, dim = fields['H'], fields['dim']
    return AttentionConfig(
        d_model=h * dim, n_heads=h, n_kv_groups=groups or h, head_dim=dim,
        n_layers=fields['layers'], vocab=fields['vocab'],
        precision=precision or Config.PRECISION
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog=Config.TOOL_NAME, description="Grouped-query attention toolkit")
    parser.add_argument("--seed", type=int, default=0, help="Root seed; every random draw derives from it")
    parser.add_argument("--precision", choices=sorted(Config.SUPPORTED_PRECISIONS), default=None,
                        help="Overrides GQAKIT_PRECISION")
    parser.add_argument("--log-file", action="store_true", help="Also log to a per-run file")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("convert", help="Convert a checkpoint to fewer key/value groups")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--groups", type=int, required=True)
    p.add_argument("--method", choices=["mean", "first", "random"], default="mean")
    p.add_argument("--out", required=True)
    p.add_argument("--report", default=None, help="Report JSON path (default <out>.report.json)")

    p = sub.add_parser("decode", help="Greedy generation with a KV cache")
    _add_model_source(p)
    p.add_argument("--prompt", default=None, help="Comma-separated token ids")
    p.add_argument("--prompt-len", type=int, default=8, help="Seeded prompt length when --prompt is absent")
    p.add_argument("--gen", type=int, default=16)
    p.add_argument("--capacity", type=int, default=None)
    p.add_argument("--out", default=None, help="DecodeTrace JSON path, timings included")

    p = sub.add_parser("bench", help="Measure decode time across group counts")
    p.add_argument("--in", dest="inputs", nargs="+", default=None, help="One checkpoint per G")
    p.add_argument("--auto-model", default=None, help=f"e.g. {Config.AUTO_MODEL}")
    p.add_argument("--groups", default=None, help="Comma-separated G values for --auto-model")
    p.add_argument("--seq-in", type=int, default=128)
    p.add_argument("--seq-out", type=int, default=64)
    p.add_argument("--trials", type=int, default=Config.BENCH_MIN_TRIALS)
    _add_hardware(p)
    p.add_argument("--out", default="bench.csv", help="CSV path; JSON goes beside it")

    p = sub.add_parser("cost", help="Analytic step time per group count")
    _add_model_source(p)
    p.add_argument("--groups", default=None, help="Comma-separated G values (default: divisors of H)")
    p.add_argument("--seq-len", type=int, default=2048)
    p.add_argument("--batch", type=int, default=1)
    _add_hardware(p)
    p.add_argument("--out", default=None, help="CSV path")

    p = sub.add_parser("train", help="Pre-train a toy model on a synthetic task")
    p.add_argument("--auto-model", default=Config.AUTO_MODEL)
    p.add_argument("--groups", type=int, default=None, help="G (default H, the multi-head base)")
    _add_task(p)
    p.add_argument("--steps", type=int, default=Config.BASE_STEPS)
    p.add_argument("--lr", type=float, default=Config.LEARNING_RATE)
    p.add_argument("--batch-size", type=int, default=Config.BATCH_SIZE)
    p.add_argument("--out", required=True, help="Checkpoint path")

    p = sub.add_parser("uptrain", help="Convert and continue training for a proportion of the base budget")
    p.add_argument("--in", dest="input", required=True, help="Base checkpoint written by `train`")
    p.add_argument("--groups", required=True, help="Comma-separated target G values")
    p.add_argument("--method", default="mean", help="Comma-separated methods: mean, first, random")
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("eval", help="Held-out loss of a checkpoint")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--task", choices=[k.value for k in TaskKind], default=None, help="Defaults to the training task")
    p.add_argument("--task-seed", type=int, default=None)
    p.add_argument("--seq-len", type=int, default=None)

    p = sub.add_parser("report", help="Join uptraining quality with bench timings")
    p.add_argument("--summary", required=True, help="uptrain_summary.csv")
    p.add_argument("--bench", required=True, help="bench or cost CSV")
    p.add_argument("--method", default="mean")
    p.add_argument("--alpha", type=float, default=None, help="Defaults to the largest alpha in the summary")
    p.add_argument("--out", required=True)

    p = sub.add_parser("rerun", help="Replay the invocation recorded in a manifest")
    p.add_argument("--manifest", required=True)
    return parser


def _add_model_source(p):
    p.add_argument("--in", dest="input", default=None, help="Checkpoint path")
    p.add_argument("--auto-model", default=None, help=f"e.g. {Config.AUTO_MODEL}")


def _add_hardware(p):
    p.add_argument("--bandwidth", type=float, default=Config.HARDWARE_BANDWIDTH, help="bytes/s per partition")
    p.add_argument("--peak-flops", type=float, default=Config.HARDWARE_PEAK_FLOPS, help="FLOP/s per partition")
    p.add_argument("--partitions", type=int, default=Config.HARDWARE_PARTITIONS)


def _add_task(p):
    p.add_argument("--task", choices=[k.value for k in TaskKind], default=Config.DEFAULT_TASK)
    p.add_argument("--task-seed", type=int, default=0)
    p.add_argument("--seq-len", type=int, default=Config.SEQ_LEN)


class GQAKitApp:
    """
    Main application class: one method per subcommand, each returning an exit code.
    """

    def __init__(self, args: argparse.Namespace, argv: Sequence[str], run_id: str = None):
        """
        Initialize the application.

        Args:
            args (argparse.Namespace): Parsed arguments
            argv (list): Raw arguments, recorded on the manifest
            run_id (str): Identifier for log files
        """
        self.args = args
        self.run_id = run_id or str(uuid.uuid4())
        if args.precision:
            Config.PRECISION = args.precision
        self.log_filename = Config.setup_logging(self.run_id, to_file=args.log_file)
        Config.validate_config()
        self.metrics = MetricsCollector(run_id=self.run_id)

        params = {k: v for k, v in vars(args).items() if k != 'log_file'}
        params['precision'] = Config.PRECISION
        self.manifest = RunManifest(subcommand=args.command, params=params, argv=list(argv),
                                    seeds=[args.seed])
        self.store = CheckpointStore()
        self.writer = ReportWriter(self.manifest, store=self.store)
        self.conversion = ConversionService(self.store)
        logging.info(f"{Config.TOOL_NAME} {Config.TOOL_VERSION} '{args.command}' run {self.run_id}")

    def run(self) -> int:
        handler = getattr(self, f"cmd_{self.args.command}")
        code = handler()
        if self.writer.written:
            self.writer.finalize()
        return code

    def _emit(self, data):
        sys.stdout.write(to_json(data) + "\n")

    def _load(self, path: str) -> Checkpoint:
        self.manifest.inputs.append(path)
        return self.store.load(path)

    def _model(self, groups: int = None) -> Checkpoint:
        """Checkpoint from --in, or a seeded one from --auto-model."""
        args = self.args
        if args.input and args.auto_model:
            raise UsageError("use either --in or --auto-model, not both")
        if args.input:
            return self._load(args.input)
        config = parse_auto_model(args.auto_model or Config.AUTO_MODEL, groups)
        return Checkpoint.initialize(config, Rng(derive_seed(args.seed, SEED_MODEL)))

    def _hardware(self) -> HardwareSpec:
        a = self.args
        return HardwareSpec(memory_bandwidth=a.bandwidth, peak_flops=a.peak_flops, partitions=a.partitions)

    def cmd_convert(self) -> int:
        args = self.args
        method = ConversionMethod.parse(args.method, seed=derive_seed(args.seed, SEED_CONVERT))
        self.manifest.inputs.append(args.input)
        _, converted, report = self.conversion.convert_file(args.input, args.groups, method)

        data = report.to_dict()
        data['source_fingerprint'] = self.store.fingerprint(args.input)
        data['output_fingerprint'] = self.writer.write_checkpoint(args.out, converted)
        self.writer.write_json(args.report or f"{args.out}.report.json", data)
        self._emit(data)
        return 0

    def cmd_decode(self) -> int:
        args = self.args
        ckpt = self._model()
        if args.prompt:
            prompt = parse_int_list(args.prompt)
        else:
            if args.prompt_len < 1:
                raise UsageError("--prompt-len must be >= 1")
            prompt = Rng(derive_seed(args.seed, SEED_PROMPT)).integers(ckpt.config.vocab, (args.prompt_len,)).tolist()

        trace = generate(ckpt, prompt, args.gen, capacity=args.capacity, metrics=self.metrics)
        if args.out:
            self.writer.write_json(args.out, trace.to_dict(include_timing=True))
        sys.stdout.write(" ".join(str(t) for t in trace.tokens) + "\n")
        self._emit(trace.to_dict(include_timing=False))
        return 0

    def cmd_bench(self) -> int:
        args = self.args
        if args.inputs and args.auto_model:
            raise UsageError("use either --in or --auto-model, not both")
        if args.inputs:
            checkpoints = [self._load(p) for p in args.inputs]
        else:
            base_config = parse_auto_model(args.auto_model or Config.AUTO_MODEL)
            base = Checkpoint.initialize(base_config, Rng(derive_seed(args.seed, SEED_MODEL)))
            groups = parse_int_list(args.groups) if args.groups else [base_config.n_heads]
            checkpoints = [self.conversion.convert(base, g, ConversionMethod.mean_pool()) for g in groups]

        harness = BenchHarness(hardware=self._hardware(), metrics=self.metrics)
        report = harness.bench_generate(checkpoints, args.seq_in, args.seq_out, args.trials,
                                        seed=derive_seed(args.seed, SEED_PROMPT))
        frame = report.to_dataframe()
        self.writer.write_csv(args.out, frame)
        self.writer.write_json(os.path.splitext(args.out)[0] + ".json", report.to_dict())
        sys.stdout.write(frame.to_csv(index=False))
        return 0

    def cmd_cost(self) -> int:
        args = self.args
        config = self._model().config
        groups = parse_int_list(args.groups) if args.groups else None
        costs = sweep_groups(config, self._hardware(), args.seq_len, args.batch, groups)
        frame = costs_to_dataframe(costs)
        if args.out:
            self.writer.write_csv(args.out, frame)
            self.writer.write_json(os.path.splitext(args.out)[0] + ".json", [c.to_dict() for c in costs])
        sys.stdout.write(frame.to_csv(index=False))
        return 0

    def _task(self, vocab: int, sidecar: dict = None) -> SyntheticTask:
        args = self.args
        base = dict(sidecar['task']) if sidecar else {}
        if getattr(args, 'task', None) and args.task != base.get('kind'):
            base = {k: v for k, v in base.items() if k != 'sharpness'}
            base['kind'] = args.task
        if getattr(args, 'task_seed', None) is not None:
            base['seed'] = args.task_seed
        if getattr(args, 'seq_len', None):
            base['seq_len'] = args.seq_len
        base.setdefault('kind', Config.DEFAULT_TASK)
        base.setdefault('seed', 0)
        base.setdefault('seq_len', Config.SEQ_LEN)
        base['vocab'] = vocab
        return SyntheticTask.from_dict(base)

    def _sidecar(self, path: str, required: bool) -> Optional[dict]:
        sidecar_path = path + TRAIN_SIDECAR_SUFFIX
        if not os.path.exists(sidecar_path):
            if required:
                raise UsageError(f"missing training record {sidecar_path}; train the base with `train`")
            return None
        self.manifest.inputs.append(sidecar_path)
        with open(sidecar_path, 'r', encoding='utf-8') as f:
            return json.load(f)

    def cmd_train(self) -> int:
        args = self.args
        config = parse_auto_model(args.auto_model, args.groups)
        task = self._task(config.vocab)
        training = TrainingService(task, metrics=self.metrics, conversion=self.conversion)
        result = training.pretrain(config, args.steps, derive_seed(args.seed, SEED_MODEL),
                                   lr=args.lr, batch_size=args.batch_size)

        record = result.to_dict()
        record['fingerprint'] = self.writer.write_checkpoint(args.out, result.checkpoint)
        self.writer.write_json(args.out + TRAIN_SIDECAR_SUFFIX, record)
        curve = pd.DataFrame({'step': np.arange(len(result.loss_trajectory)), 'loss': result.loss_trajectory})
        self.writer.write_csv(args.out + ".loss.csv", curve)
        self._emit({'eval_loss': result.eval_loss, 'entropy_floor': task.entropy_floor(),
                    'uniform_loss': float(np.log(config.vocab)), 'fingerprint': record['fingerprint']})
        return 0

    def cmd_uptrain(self) -> int:
        args = self.args
        base = self._load(args.input)
        sidecar = self._sidecar(args.input, required=True)
        task = SyntheticTask.from_dict(sidecar['task'])
        groups = parse_int_list(args.groups)
        methods = [m.strip() for m in args.method.split(',') if m.strip()]
        if args.seeds < 1:
            raise UsageError("--seeds must be >= 1")
        base_id = self.store.fingerprint(args.input)
        training = TrainingService(task, metrics=self.metrics, conversion=self.conversion)

        runs = []
        for i in range(args.seeds):
            seed = derive_seed(args.seed, SEED_UPTRAIN, i)
            self.manifest.seeds.append(seed)
            for name in methods:
                method = ConversionMethod.parse(name, seed=derive_seed(seed, SEED_CONVERT))
                for g in groups:
                    run = training.uptrain(base, g, method, args.alpha, base_steps=sidecar['steps'],
                                           seed=seed, lr=sidecar['lr'], batch_size=sidecar['batch_size'],
                                           base_eval_loss=sidecar['eval_loss'], base_id=base_id)
                    runs.append(run)
                    path = os.path.join(args.out_dir, f"uptrain_{name}_g{g}_a{args.alpha:g}_s{i}.json")
                    self.writer.write_json(path, run.to_dict())

        summary = aggregate_runs(runs)
        self.writer.write_csv(os.path.join(args.out_dir, "uptrain_summary.csv"), summary)
        data = {
            'base_id': base_id,
            'base_eval_loss': sidecar['eval_loss'],
            'runs': len(runs),
            'medians': summary.to_dict(orient='records')
        }
        if {'mean', 'random'} <= set(methods):
            data['mean_vs_random_gap'] = {str(g): conversion_gap(summary, g, args.alpha) for g in groups}
        self.writer.write_json(os.path.join(args.out_dir, "uptrain_summary.json"), data)
        self._emit(data)
        return 0

    def cmd_eval(self) -> int:
        args = self.args
        ckpt = self._load(args.input)
        task = self._task(ckpt.config.vocab, self._sidecar(args.input, required=False))
        loss = eval_loss(ckpt, task.eval_batch())
        self._emit({'eval_loss': loss, 'entropy_floor': task.entropy_floor(),
                    'uniform_loss': float(np.log(ckpt.config.vocab)), 'task': task.to_dict()})
        return 0

    def cmd_report(self) -> int:
        args = self.args
        self.manifest.inputs.extend([args.summary, args.bench])
        summary = pd.read_csv(args.summary)
        bench = pd.read_csv(args.bench)
        quality = summary[summary['method'] == args.method]
        if quality.empty:
            raise UsageError(f"no rows for method '{args.method}' in {args.summary}")
        alpha = quality['alpha'].max() if args.alpha is None else args.alpha
        quality = quality[np.isclose(quality['alpha'], alpha)][['groups', 'median_eval_loss']]
        table = quality.merge(bench[['groups', 'wall_time_s_median', 'pred_time_s', 'kv_bytes']],
                              on='groups', how='inner').sort_values('groups').reset_index(drop=True)
        table.insert(1, 'alpha', alpha)
        table.insert(1, 'method', args.method)
        self.writer.write_csv(args.out, table)
        sys.stdout.write(table.to_csv(index=False))
        return 0

    def cmd_rerun(self) -> int:
        manifest = RunManifest.load(self.args.manifest)
        if manifest.subcommand == "rerun":
            raise UsageError("a rerun manifest cannot be replayed")
        logging.info(f"Replaying '{manifest.subcommand}' from {self.args.manifest} "
                     f"(recorded with {Config.TOOL_NAME} {manifest.tool_version})")
        return main(manifest.argv)


def main(argv: Sequence[str] = None) -> int:
    """
    Entry point.

    Returns:
        int: 0 iff every requested output was fully written
    """
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        return GQAKitApp(args, argv).run()
    except Exception as e:
        logging.error(f"{type(e).__name__}: {str(e)}")
        sys.stderr.write(json.dumps({'error': type(e).__name__, 'message': str(e)}) + "\n")
        return 2 if isinstance(e, UsageError) else 1


if __name__ == "__main__":
    sys.exit(main())
