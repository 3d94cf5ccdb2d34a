"""
Experiment Orchestrator
מנהל הזרימה המרכזי של מעבדת העברת ה-PEFT
"""
import asyncio
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy import stats

from analysis import compare_distributions, layer_influence, record_activations, sign_agreement, weight_shift
from analysis.bound import build_bound_report
from autograd.tensor import set_precision
from core.errors import AcceptanceFailure, CheckpointError, ConfigError, FrozenBaseViolation
from core.models import (
    ApplySite, Arm, ArmRun, ArmSummary, BoundReport, ExperimentConfig, PairedTest,
    ProtocolResult, RunManifest, SweepPoint, TaskMetrics, TransferRecord, TransPeftConfig,
    UpdatePair
)
from model.checkpoint import load_checkpoint, save_checkpoint
from model.container import fingerprint_arrays
from peft_modules.state import attach, load_peft, save_peft, transfer
from storage.artifacts import ArtifactStore
from tasks.synthetic import Example, dump_jsonl, generate, mixture_stream
from training.trainer import continual_update, evaluate_task, finetune_peft, make_update_pair, pretrain

logger = logging.getLogger(__name__)

M0_FILE = "m0.ckpt"
M1_FILE = "m1.ckpt"
PEFT_FILE = "peft.ckpt"
PROBE_SIZE = 256
PERTURBATION_PROBE = 8

DEFAULT_GRIDS: Dict[str, List[Tuple[float, float, ApplySite]]] = {
    "p_c": [(0.0, p, ApplySite.FFN) for p in (0.0, 0.1, 0.2, 0.3, 0.5)],
    "p_i": [(p, 0.2, ApplySite.FFN) for p in (0.0, 0.01, 0.05, 0.1, 0.5)],
}
SWEEP_TABLES = {"p_c": "fig6_sweep.csv", "p_i": "sweep_p_i.csv", "site": "fig8_ablation.csv"}
SWEEP_COLUMNS = ["variant", "apply_site", "p_i", "p_c", "seed", "loss", "accuracy"]
ARM_COLUMNS = ["arm", "seed", "task", "loss", "accuracy"]


# ========== Worker jobs ==========

class TrainJob(BaseModel):
    """עבודת אימון אחת: PEFT על בסיס אחד, והערכה על בסיס אחד או יותר"""
    model_config = ConfigDict(extra="forbid")

    experiment: Dict[str, Any]
    seed: int
    train_on: str
    transpeft: Optional[Dict[str, Any]] = None
    evaluate_on: Dict[str, str]
    bases: Dict[str, str]
    fingerprints: Dict[str, str]
    out_dir: str


class JobResult(BaseModel):
    seed: int
    peft_path: str
    peft_fingerprint: str
    metrics: Dict[str, TaskMetrics]
    transfers: Dict[str, TransferRecord]
    steps: int
    final_loss: Optional[float] = None


def run_train_job(job: TrainJob) -> JobResult:
    """
    Runs in a worker process: loads the bases, fine-tunes, evaluates, and
    checks that neither the bases nor the PEFT bytes moved along the way.
    """
    experiment = ExperimentConfig.model_validate(job.experiment)
    set_precision(experiment.precision)
    models = {}
    for name, path in job.bases.items():
        models[name] = load_checkpoint(Path(path), expected_tag=experiment.model.architecture_tag())
        if models[name].fingerprint() != job.fingerprints[name]:
            raise CheckpointError(f"{path} no longer matches fingerprint {job.fingerprints[name][:12]}")

    split = generate(experiment.task)
    transpeft = TransPeftConfig.model_validate(job.transpeft) if job.transpeft is not None else None
    optimizer = experiment.finetune.model_copy(update={"seed": job.seed})
    out_dir = Path(job.out_dir)
    peft, history = finetune_peft(
        models[job.train_on], split.train, experiment.peft, optimizer,
        transpeft=transpeft, init_seed=job.seed, worker_id=job.seed, dump_dir=out_dir,
    )
    peft_fingerprint = save_peft(peft, out_dir / PEFT_FILE)

    metrics: Dict[str, TaskMetrics] = {}
    transfers: Dict[str, TransferRecord] = {}
    for label, target in job.evaluate_on.items():
        if target == job.train_on:
            handle = attach(models[target], peft)
        else:
            handle = transfer(peft, models[target])
            transfers[label] = handle.transfer
        metrics[label] = evaluate_task(handle.model, handle.peft, split.test)

    if peft.fingerprint() != peft_fingerprint:
        raise FrozenBaseViolation("PEFT bytes changed during transfer")
    for name, model in models.items():
        if model.fingerprint() != job.fingerprints[name]:
            raise FrozenBaseViolation(f"base {name} changed during the job")
    return JobResult(
        seed=job.seed,
        peft_path=str(out_dir / PEFT_FILE),
        peft_fingerprint=peft_fingerprint,
        metrics=metrics,
        transfers=transfers,
        steps=history.steps,
        final_loss=history.final_loss,
    )


# ========== Statistics ==========

def summarize(runs: Sequence[ArmRun]) -> List[ArmSummary]:
    summaries = []
    for arm in Arm:
        accs = [r.metrics.accuracy for r in runs if r.arm == arm]
        if not accs:
            continue
        losses = [r.metrics.loss for r in runs if r.arm == arm]
        summaries.append(ArmSummary(
            arm=arm,
            mean_accuracy=float(np.mean(accs)),
            std_accuracy=float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0,
            mean_loss=float(np.mean(losses)),
            n_seeds=len(accs),
        ))
    return summaries


def paired_test(a: Sequence[float], b: Sequence[float], label_a: Arm, label_b: Arm) -> PairedTest:
    """Paired t-test over seeds (a vs b); undefined statistics become None."""
    diff = float(np.mean(np.asarray(a) - np.asarray(b)))
    statistic = p_value = None
    if len(a) > 1:
        result = stats.ttest_rel(a, b)
        if math.isfinite(result.statistic):
            statistic, p_value = float(result.statistic), float(result.pvalue)
    return PairedTest(arm_a=label_a, arm_b=label_b, mean_difference=diff, statistic=statistic, p_value=p_value)


def _by_seed(runs: Sequence[ArmRun], arm: Arm) -> Dict[int, float]:
    return {r.seed: r.metrics.accuracy for r in runs if r.arm == arm}


def protocol_tests(runs: Sequence[ArmRun]) -> Tuple[List[PairedTest], Optional[float]]:
    tests = []
    pairs = [
        (Arm.TRANS_PEFT, Arm.DIRECT_TRANSFER),
        (Arm.FINETUNE_N, Arm.DIRECT_TRANSFER),
        (Arm.FINETUNE_N, Arm.TRANS_PEFT),
        (Arm.FINETUNE_O, Arm.DIRECT_TRANSFER),
    ]
    for arm_a, arm_b in pairs:
        a, b = _by_seed(runs, arm_a), _by_seed(runs, arm_b)
        seeds = sorted(set(a) & set(b))
        if seeds:
            tests.append(paired_test([a[s] for s in seeds], [b[s] for s in seeds], arm_a, arm_b))

    means = {arm: np.mean(list(_by_seed(runs, arm).values())) for arm in Arm if _by_seed(runs, arm)}
    gap = None
    if {Arm.TRANS_PEFT, Arm.DIRECT_TRANSFER, Arm.FINETUNE_N} <= set(means):
        denominator = means[Arm.FINETUNE_N] - means[Arm.DIRECT_TRANSFER]
        if denominator > 0:
            gap = float((means[Arm.TRANS_PEFT] - means[Arm.DIRECT_TRANSFER]) / denominator)
    return tests, gap


def check_protocol(result: ProtocolResult, alpha: float = 0.05, min_recovery: float = 0.5) -> None:
    """בדיקת קבלה: Trans-PEFT עוקף העברה ישירה באופן מובהק ומשחזר חלק מהפער"""
    test = next((t for t in result.tests if t.arm_a == Arm.TRANS_PEFT and t.arm_b == Arm.DIRECT_TRANSFER), None)
    if test is None:
        raise AcceptanceFailure("protocol did not run both trans_peft and direct_transfer")
    if test.mean_difference <= 0:
        raise AcceptanceFailure(f"trans_peft does not beat direct_transfer (Δ={test.mean_difference:.4f})")
    if test.p_value is None or test.p_value >= alpha:
        raise AcceptanceFailure(f"trans_peft vs direct_transfer not significant (p={test.p_value})")
    if result.gap_recovery is None or result.gap_recovery < min_recovery:
        raise AcceptanceFailure(f"gap recovery {result.gap_recovery} below {min_recovery}")


def _mean_accuracy(points: Sequence[SweepPoint], predicate: Callable[[SweepPoint], bool]) -> Dict[int, float]:
    return {p.seed: p.accuracy for p in points if predicate(p)}


def check_sweep(grid: str, points: Sequence[SweepPoint], alpha: float = 0.05) -> None:
    if grid == "p_c":
        means = {}
        for p_c in sorted({p.p_c for p in points}):
            means[p_c] = float(np.mean([p.accuracy for p in points if p.p_c == p_c]))
        mid = [value for p_c, value in means.items() if 0.1 <= p_c <= 0.3]
        if 0.0 not in means or 0.5 not in means or not mid:
            raise AcceptanceFailure("p_c sweep lacks the 0, mid-range and 0.5 points")
        if not max(mid) > max(means[0.0], means[0.5]):
            raise AcceptanceFailure(f"no mid-range p_c beats both endpoints: {means}")
        return
    if grid == "site":
        baseline = _mean_accuracy(points, lambda p: p.p_i == 0.0 and p.p_c == 0.0)
        seeds = sorted(baseline)

        def versus(site: ApplySite) -> PairedTest:
            arm = _mean_accuracy(points, lambda p: p.apply_site == site and (p.p_i > 0 or p.p_c > 0))
            return paired_test([arm[s] for s in seeds], [baseline[s] for s in seeds], Arm.TRANS_PEFT, Arm.DIRECT_TRANSFER)

        ffn, attention = versus(ApplySite.FFN), versus(ApplySite.ATTENTION)
        if ffn.mean_difference <= 0 or ffn.p_value is None or ffn.p_value >= alpha:
            raise AcceptanceFailure(f"FFN-site strategies do not improve transfer significantly (p={ffn.p_value})")
        if attention.mean_difference > 0 and attention.p_value is not None and attention.p_value < alpha:
            raise AcceptanceFailure(f"attention-site strategies improve transfer significantly (p={attention.p_value})")
        return
    raise ConfigError(f"no acceptance rule for the {grid} grid")


def _variant(point: SweepPoint) -> str:
    if point.p_i == 0.0 and point.p_c == 0.0:
        return "direct_transfer"
    return point.apply_site.value


# ========== Orchestrator ==========

class ExperimentOrchestrator:
    """
    מנהל זרימה מרכזי לניסויי העברה.

    זרימת עבודה:
    1. אימון מקדים של M0
    2. עדכון מתמשך ל-M1
    3. כוונון PEFT (עם או בלי אסטרטגיות Trans-PEFT)
    4. העברה והערכה על הגרסה החדשה
    5. ניתוחים, סריקות ודוחות
    """

    def __init__(
        self,
        experiment: ExperimentConfig,
        output_dir: Optional[Path] = None,
        jobs: int = 1,
        invocation: Optional[Dict[str, Any]] = None,
    ):
        self.experiment = experiment
        # דגלי שורת הפקודה כפי שהתקבלו - נשמרים במניפסט להרצה חוזרת
        self.invocation = invocation or {}
        self.store = ArtifactStore(output_dir or experiment.output_dir)
        self.jobs = max(1, jobs)
        set_precision(experiment.precision)

    # ========== Helpers ==========

    def _manifest(
        self,
        command: str,
        started: float,
        arguments: Optional[Dict[str, Any]] = None,
        fingerprints: Optional[Dict[str, str]] = None,
        metrics_files: Sequence[Path] = (),
        data: Optional[Dict[str, Any]] = None,
    ) -> RunManifest:
        manifest = RunManifest(
            command=command,
            config=self.experiment.model_dump(mode="json"),
            seeds=self.experiment.seeds,
            precision=self.experiment.precision,
            data={"arguments": {**(arguments or {}), **self.invocation}, **(data or {})},
            fingerprints=fingerprints or {},
            metrics_files=[self.store.relative(p) for p in metrics_files],
            wall_clock_seconds=round(time.monotonic() - started, 3),
        )
        try:
            self.store.write_manifest(manifest)
        except OSError as e:
            # מניפסט שלא נשמר לא מפיל את ההרצה - המדדים כבר על הדיסק
            logger.error(f"Failed to write manifest for {command}: {e}")
        return manifest

    async def _fan_out(self, jobs: Sequence[TrainJob]) -> List[JobResult]:
        """הרצת עבודות במקביל (או בתהליך הנוכחי כש-jobs=1)"""
        if self.jobs == 1 or len(jobs) <= 1:
            return [run_train_job(job) for job in jobs]
        loop = asyncio.get_running_loop()
        with ProcessPoolExecutor(max_workers=min(self.jobs, len(jobs))) as pool:
            return list(await asyncio.gather(*(loop.run_in_executor(pool, run_train_job, job) for job in jobs)))

    def _job(
        self,
        seed: int,
        train_on: str,
        evaluate_on: Dict[str, str],
        bases: Dict[str, Path],
        out_dir: Path,
        transpeft: Optional[TransPeftConfig] = None,
    ) -> TrainJob:
        fingerprints = {}
        for name, path in bases.items():
            fingerprints[name] = load_checkpoint(path).fingerprint()
        return TrainJob(
            experiment=self.experiment.model_dump(mode="json"),
            seed=seed,
            train_on=train_on,
            transpeft=transpeft.model_dump(mode="json") if transpeft is not None else None,
            evaluate_on=evaluate_on,
            bases={name: str(path) for name, path in bases.items()},
            fingerprints=fingerprints,
            out_dir=str(out_dir),
        )

    def _pair_bases(self, pair: UpdatePair) -> Dict[str, Path]:
        bases = {"m0": Path(pair.m0_path), "m1": Path(pair.m1_path)}
        for name, path in bases.items():
            model = load_checkpoint(path, expected_tag=pair.architecture_tag)
            expected = pair.m0_fingerprint if name == "m0" else pair.m1_fingerprint
            if model.fingerprint() != expected:
                raise CheckpointError(f"{path} does not match the update pair fingerprint")
        return bases

    def pair_from_checkpoints(self, m0_path: Path, m1_path: Path) -> UpdatePair:
        """זוג גרסאות משתי נקודות שמירה קיימות (למשל M1=M0 כבדיקת שפיות)"""
        tag = self.experiment.model.architecture_tag()
        m0 = load_checkpoint(Path(m0_path), expected_tag=tag)
        m1 = load_checkpoint(Path(m1_path), expected_tag=tag)
        shift = weight_shift(m0, m1)
        return UpdatePair(
            m0_path=str(m0_path),
            m1_path=str(m1_path),
            m0_fingerprint=m0.fingerprint(),
            m1_fingerprint=m1.fingerprint(),
            architecture_tag=tag,
            mode=self.experiment.update.mode,
            kappa=self.experiment.update.kappa,
            corpus=self.experiment.update.corpus,
            steps=0,
            epsilon_att=shift.epsilon_att,
            rho=shift.rho,
        )

    def load_pair(self, path: Optional[Path] = None) -> UpdatePair:
        if path is None:
            return UpdatePair.model_validate(self.store.read_json("update_pair.json"))
        return UpdatePair.model_validate(ArtifactStore(Path(path).parent).read_json(Path(path).name))

    def probe_set(self, seed: int) -> List[Example]:
        """256 רצפים מתוך סט הבדיקה של המשימה, קבועים לפי seed"""
        test = generate(self.experiment.task).test
        rng = np.random.default_rng(seed)
        chosen = sorted(rng.choice(len(test), size=min(PROBE_SIZE, len(test)), replace=False).tolist())
        return [test[i] for i in chosen]

    # ========== Base models ==========

    async def pretrain(self) -> Tuple[Path, str]:
        """אימון מקדים של M0 על תערובת הקורפוס"""
        started = time.monotonic()
        exp = self.experiment
        corpus = mixture_stream(exp.pretrain.corpus, exp.model.vocab_size, exp.pretrain.optimizer.seed)
        model, history = pretrain(exp.model, corpus, exp.pretrain.optimizer, dump_dir=self.store.root)
        path = self.store.path(M0_FILE)
        fingerprint = save_checkpoint(model, path)

        baseline = math.log(exp.model.vocab_size)
        metrics = self.store.write_json("pretrain_metrics.json", {
            "steps": history.steps,
            "epoch_losses": history.epoch_losses,
            "final_loss": history.final_loss,
            "baseline_loss": baseline,
            "margin": None if history.final_loss is None else baseline - history.final_loss,
        })
        self._manifest(
            "pretrain", started, fingerprints={"m0": fingerprint}, metrics_files=[metrics],
            data={"corpus": _stream_descriptor(corpus)},
        )
        return path, fingerprint

    async def update(self, m0_path: Optional[Path] = None) -> UpdatePair:
        """עדכון מתמשך M0 → M1"""
        started = time.monotonic()
        exp = self.experiment
        m0_path = Path(m0_path or self.store.path(M0_FILE))
        m0 = load_checkpoint(m0_path, expected_tag=exp.model.architecture_tag())
        m0_fingerprint = m0.fingerprint()
        corpus = mixture_stream(exp.update.corpus, exp.model.vocab_size, exp.update.optimizer.seed)
        m1, history, shift = continual_update(m0, exp.update, corpus, dump_dir=self.store.root)
        if m0.fingerprint() != m0_fingerprint:
            raise FrozenBaseViolation("continual update modified M0")

        m1_path = self.store.path(M1_FILE)
        save_checkpoint(m1, m1_path)
        pair = make_update_pair(m0, m1, exp.update, history, shift, m0_path, m1_path)
        files = [
            self.store.write_json("update_pair.json", pair),
            self.store.write_json("weight_shift.json", shift),
        ]
        self._manifest(
            "update", started, arguments={"m0": str(m0_path)},
            fingerprints={"m0": pair.m0_fingerprint, "m1": pair.m1_fingerprint},
            metrics_files=files, data={"corpus": _stream_descriptor(corpus)},
        )
        return pair

    # ========== Fine-tuning and transfer ==========

    async def finetune(self, base_path: Optional[Path] = None, strategies: bool = False) -> List[JobResult]:
        """כוונון PEFT על בסיס אחד, לכל seed"""
        started = time.monotonic()
        base_path = Path(base_path or self.store.path(M0_FILE))
        transpeft = self.experiment.transpeft if strategies else None
        jobs = [
            self._job(seed, "base", {"base": "base"}, {"base": base_path},
                      self.store.path("finetune", f"seed_{seed}"), transpeft)
            for seed in self.experiment.seeds
        ]
        results = await self._fan_out(jobs)
        files = [
            self.store.write_json(Path("finetune", f"seed_{r.seed}", "metrics.json"), r.metrics["base"])
            for r in results
        ]
        self._manifest(
            "finetune", started, arguments={"base": str(base_path), "strategies": strategies},
            fingerprints={f"peft_seed_{r.seed}": r.peft_fingerprint for r in results} | {"base": jobs[0].fingerprints["base"]},
            metrics_files=files, data=self._task_descriptor(),
        )
        return results

    async def transfer_eval(self, peft_path: Path, target_path: Path) -> Dict[str, Any]:
        """העברת PEFT קיים לבסיס יעד והערכה - בלי כוונון מחדש"""
        started = time.monotonic()
        peft = load_peft(Path(peft_path))
        target = load_checkpoint(Path(target_path), expected_tag=peft.architecture_tag)
        target_fingerprint = target.fingerprint()
        handle = transfer(peft, target)
        metrics = evaluate_task(handle.model, handle.peft, generate(self.experiment.task).test)
        if target.fingerprint() != target_fingerprint or peft.fingerprint() != handle.transfer.peft_fingerprint:
            raise FrozenBaseViolation("transfer modified the target base or the PEFT state")
        result = {"metrics": metrics, "transfer": handle.transfer}
        path = self.store.write_json(Path("transfer_eval", "metrics.json"), result)
        self._manifest(
            "transfer-eval", started, arguments={"peft": str(peft_path), "target": str(target_path)},
            fingerprints={"peft": handle.transfer.peft_fingerprint, "target": target_fingerprint},
            metrics_files=[path], data=self._task_descriptor(),
        )
        return result

    def _task_descriptor(self) -> Dict[str, Any]:
        split = generate(self.experiment.task)
        return {
            "task": self.experiment.task.model_dump(mode="json"),
            "train": _stream_descriptor(split.train),
            "test": _stream_descriptor(split.test),
        }

    # ========== Protocol ==========

    async def run_protocol(self, pair: UpdatePair, arms: Sequence[Arm] = tuple(Arm)) -> ProtocolResult:
        """
        ארבע הזרועות:
        finetune_o - כוונון והערכה על M0
        finetune_n - כוונון והערכה על M1
        direct_transfer - כוונון על M0 בלי אסטרטגיות, הערכה על M1
        trans_peft - כוונון על M0 עם אסטרטגיות, הערכה על M1
        """
        started = time.monotonic()
        if not arms:
            raise ConfigError("protocol needs at least one arm")
        bases = self._pair_bases(pair)
        arms = set(arms)
        jobs: List[Tuple[TrainJob, Dict[str, Arm]]] = []
        for seed in self.experiment.seeds:
            vanilla = {a.value: target for a, target in ((Arm.FINETUNE_O, "m0"), (Arm.DIRECT_TRANSFER, "m1")) if a in arms}
            if vanilla:
                jobs.append(self._job(seed, "m0", vanilla, bases, self.store.path("protocol", "vanilla_m0", f"seed_{seed}")))
            if Arm.TRANS_PEFT in arms:
                jobs.append(self._job(seed, "m0", {Arm.TRANS_PEFT.value: "m1"}, bases,
                                      self.store.path("protocol", "transpeft_m0", f"seed_{seed}"), self.experiment.transpeft))
            if Arm.FINETUNE_N in arms:
                jobs.append(self._job(seed, "m1", {Arm.FINETUNE_N.value: "m1"}, bases,
                                      self.store.path("protocol", "vanilla_m1", f"seed_{seed}")))

        results = await self._fan_out(jobs)
        runs: List[ArmRun] = []
        files: List[Path] = []
        for job, result in zip(jobs, results):
            for label, metrics in result.metrics.items():
                run = ArmRun(
                    arm=Arm(label),
                    seed=result.seed,
                    task=self.experiment.task.kind,
                    metrics=metrics,
                    peft_fingerprint=result.peft_fingerprint,
                    base_fingerprints={"train": job.fingerprints[job.train_on],
                                       "eval": job.fingerprints[job.evaluate_on[label]]},
                )
                runs.append(run)
                files.append(self.store.write_json(Path("protocol", label, f"seed_{result.seed}", "arm_run.json"), run))
        runs.sort(key=lambda r: (r.arm.value, r.seed))

        tests, gap = protocol_tests(runs)
        result = ProtocolResult(runs=runs, summaries=summarize(runs), tests=tests, gap_recovery=gap)
        files.append(self.store.write_json(Path("protocol", "protocol.json"), result))
        files.append(self.store.write_csv(Path("protocol", "arms.csv"), ARM_COLUMNS, [_arm_row(r) for r in runs]))
        for summary in result.summaries:
            logger.info(f"{summary.arm.value}: accuracy {summary.mean_accuracy:.4f} ± {summary.std_accuracy:.4f}")
        self._manifest(
            "protocol", started, arguments={"arms": sorted(a.value for a in arms)},
            fingerprints={"m0": pair.m0_fingerprint, "m1": pair.m1_fingerprint},
            metrics_files=files, data=self._task_descriptor(),
        )
        return result

    # ========== Sweeps ==========

    def sweep_grid(self, grid: str) -> List[TransPeftConfig]:
        base = self.experiment.transpeft
        if grid == "site":
            points = [(0.0, 0.0, ApplySite.FFN)] + [(base.p_i, base.p_c, site) for site in ApplySite]
        elif grid in DEFAULT_GRIDS:
            points = DEFAULT_GRIDS[grid]
        else:
            raise ConfigError(f"unknown sweep grid {grid!r}; expected one of p_c, p_i, site")
        return [base.model_copy(update={"p_i": p_i, "p_c": p_c, "apply_site": site}) for p_i, p_c, site in points]

    async def sweep(self, pair: UpdatePair, grid: str = "p_c") -> List[SweepPoint]:
        """סריקה על קצבי האסטרטגיות: כוונון על M0, הערכת העברה על M1"""
        started = time.monotonic()
        bases = self._pair_bases(pair)
        configs = self.sweep_grid(grid)
        jobs, meta = [], []
        for cfg in configs:
            name = f"site={cfg.apply_site.value},p_i={cfg.p_i},p_c={cfg.p_c}"
            for seed in self.experiment.seeds:
                jobs.append(self._job(seed, "m0", {"transfer": "m1"}, bases,
                                      self.store.path("sweep", grid, name, f"seed_{seed}"), cfg))
                meta.append(cfg)

        results = await self._fan_out(jobs)
        points = [
            SweepPoint(p_i=cfg.p_i, p_c=cfg.p_c, apply_site=cfg.apply_site, seed=r.seed,
                       loss=r.metrics["transfer"].loss, accuracy=r.metrics["transfer"].accuracy)
            for cfg, r in zip(meta, results)
        ]
        rows = [{"variant": _variant(p), **p.model_dump(mode="json")} for p in points]
        files = [
            self.store.write_json(Path("sweep", grid, "points.json"), points),
            self.store.write_csv(SWEEP_TABLES[grid], SWEEP_COLUMNS, rows),
        ]
        self._manifest(
            "sweep", started, arguments={"grid": grid},
            fingerprints={"m0": pair.m0_fingerprint, "m1": pair.m1_fingerprint},
            metrics_files=files, data=self._task_descriptor(),
        )
        return points

    # ========== Analysis ==========

    async def _per_version_pefts(self, pair: UpdatePair, seed: int, strategies: bool = False) -> Dict[str, Any]:
        bases = self._pair_bases(pair)
        transpeft = self.experiment.transpeft if strategies else None
        tag = "transpeft" if strategies else "vanilla"
        jobs = [
            self._job(seed, "m0", {"m0": "m0"}, bases, self.store.path("analysis", f"{tag}_m0", f"seed_{seed}"), transpeft),
            self._job(seed, "m1", {"m1": "m1"}, bases, self.store.path("analysis", "vanilla_m1", f"seed_{seed}")),
        ]
        results = await self._fan_out(jobs)
        return {
            "m0": load_checkpoint(bases["m0"]), "m1": load_checkpoint(bases["m1"]),
            "peft_m0": load_peft(Path(results[0].peft_path)), "peft_m1": load_peft(Path(results[1].peft_path)),
        }

    async def analyze(self, pair: UpdatePair) -> Dict[str, Any]:
        """
        שחזור התצפיות: דמיון התפלגויות אקטיבציה (attention מול FFN),
        השפעת שכבות FFN, והסטת משקלים בין הגרסאות.
        """
        started = time.monotonic()
        seed = self.experiment.seeds[0]
        loaded = await self._per_version_pefts(pair, seed)
        probe = self.probe_set(seed)

        trace_m0 = record_activations(loaded["m0"], loaded["peft_m0"], probe)
        trace_m1 = record_activations(loaded["m1"], loaded["peft_m1"], probe)
        comparison = compare_distributions(trace_m0, trace_m1)
        influence_m0 = layer_influence(loaded["m0"], loaded["peft_m0"], probe)
        influence_m1 = layer_influence(loaded["m1"], loaded["peft_m1"], probe)
        agreement = sign_agreement(influence_m0, influence_m1)
        shift = weight_shift(loaded["m0"], loaded["m1"])

        attn_rows = [s.model_dump(mode="json") for s in comparison.sites if s.site == "attention"]
        ffn_rows = [s.model_dump(mode="json") for s in comparison.sites if s.site == "ffn"]
        influence_rows = [
            {"layer": layer, "influence_m0": a, "influence_m1": b, "same_sign": bool(np.sign(a) == np.sign(b))}
            for layer, (a, b) in enumerate(zip(influence_m0.values, influence_m1.values))
        ]
        summary = {
            "comparison": comparison,
            "influence_m0": influence_m0,
            "influence_m1": influence_m1,
            "sign_agreement": agreement,
            "weight_shift": shift,
            "probe_fingerprint": trace_m0.probe_fingerprint,
        }
        files = [
            self.store.write_csv("fig1_attn_similarity.csv", ["layer", "site", "pearson", "topk_overlap"], attn_rows),
            self.store.write_csv("fig2_ffn_similarity.csv", ["layer", "site", "pearson", "topk_overlap"], ffn_rows),
            self.store.write_csv("fig3_influence.csv", ["layer", "influence_m0", "influence_m1", "same_sign"], influence_rows),
            self.store.write_json(Path("analysis", "analysis.json"), summary),
        ]
        dump_jsonl(probe, self.store.path("analysis", "probe.jsonl"))
        self._manifest(
            "analyze", started, fingerprints={"m0": pair.m0_fingerprint, "m1": pair.m1_fingerprint},
            metrics_files=files, data={**self._task_descriptor(), "probe": trace_m0.probe_fingerprint},
        )
        return summary

    async def bound_report(self, pair: UpdatePair, draws: int = 1000) -> Dict[str, List[BoundReport]]:
        """
        מדידת איברי החסם לכל seed: θ שאומן עם אסטרטגיות ו-θ רגיל,
        מול θ שאומן על M1 כנקודת ייחוס.
        """
        started = time.monotonic()
        bases = self._pair_bases(pair)
        eval_set = generate(self.experiment.task).test
        m0, m1 = load_checkpoint(bases["m0"]), load_checkpoint(bases["m1"])
        reports: Dict[str, List[BoundReport]] = {Arm.TRANS_PEFT.value: [], Arm.DIRECT_TRANSFER.value: []}
        files = []

        jobs = []
        for seed in self.experiment.seeds:
            jobs.append(self._job(seed, "m0", {"m0": "m0"}, bases, self.store.path("bound", "transpeft_m0", f"seed_{seed}"),
                                  self.experiment.transpeft))
            jobs.append(self._job(seed, "m0", {"m0": "m0"}, bases, self.store.path("bound", "vanilla_m0", f"seed_{seed}")))
            jobs.append(self._job(seed, "m1", {"m1": "m1"}, bases, self.store.path("bound", "vanilla_m1", f"seed_{seed}")))
        results = await self._fan_out(jobs)

        for index, seed in enumerate(self.experiment.seeds):
            strategy, vanilla, reference = (load_peft(Path(r.peft_path)) for r in results[3 * index:3 * index + 3])
            probe = self.probe_set(seed)[:PERTURBATION_PROBE]
            for arm, peft in ((Arm.TRANS_PEFT, strategy), (Arm.DIRECT_TRANSFER, vanilla)):
                report = build_bound_report(peft, reference, m0, m1, eval_set, self.experiment.transpeft, probe, draws)
                reports[arm.value].append(report)
                files.append(self.store.write_json(Path("bound", arm.value, f"seed_{seed}.json"), report))
        files.append(self.store.write_json(Path("bound", "bound_report.json"), reports))
        self._manifest(
            "bound-report", started, arguments={"draws": draws},
            fingerprints={"m0": pair.m0_fingerprint, "m1": pair.m1_fingerprint},
            metrics_files=files, data=self._task_descriptor(),
        )
        return reports

    # ========== Reports ==========

    def report(self) -> Dict[str, Any]:
        """איסוף כל ריצות הזרועות בתיקיית הפלט לטבלה אחת"""
        started = time.monotonic()
        runs = [ArmRun.model_validate(self.store.read_json(self.store.relative(p)))
                for p in self.store.find("**/arm_run.json")]
        runs.sort(key=lambda r: (r.arm.value, r.seed, r.task.value))
        tests, gap = protocol_tests(runs)
        summary = {"summaries": summarize(runs), "tests": tests, "gap_recovery": gap, "n_runs": len(runs)}
        files = [
            self.store.write_csv("arms.csv", ARM_COLUMNS, [_arm_row(r) for r in runs]),
            self.store.write_json("report.json", summary),
        ]
        self._manifest("report", started, metrics_files=files)
        return summary


def _arm_row(run: ArmRun) -> Dict[str, Any]:
    return {"arm": run.arm.value, "seed": run.seed, "task": run.task.value,
            "loss": run.metrics.loss, "accuracy": run.metrics.accuracy}


def _stream_descriptor(examples: Sequence[Example]) -> Dict[str, Any]:
    """תיאור נתונים למניפסט: גודל וטביעת אצבע של הטוקנים"""
    ids = np.asarray([t for e in examples for t in e.tokens], dtype=np.int64)
    lengths = np.asarray([len(e.tokens) for e in examples], dtype=np.int64)
    return {"sequences": len(examples), "fingerprint": fingerprint_arrays({"ids": ids, "lengths": lengths})}
