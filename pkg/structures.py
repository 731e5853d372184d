from dataclasses import dataclass, field
from typing import Callable, Iterator, List, Optional

TRACE_COLUMNS = ["iter", "loglik", "grad_norm", "step", "elapsed_ms"]
# Gradient norm, relative to 1 + |loglik|, below which a point counts as stationary
STATIONARY_GRAD = 1e-8


@dataclass
class TraceRow:
    iter: int
    loglik: float
    grad_norm: float
    step: float
    elapsed_ms: float
    # Exact copula log-likelihood, only recorded by pseudo-EM
    exact_loglik: Optional[float] = None

    def as_dict(self) -> dict:
        out = {name: getattr(self, name) for name in TRACE_COLUMNS}
        if self.exact_loglik is not None:
            out["exact_loglik"] = self.exact_loglik
        return out


RowSink = Callable[[TraceRow], None]
# Maps a restart seed to the sink its trace rows are streamed to
SinkFactory = Callable[[int], Optional[RowSink]]


@dataclass
class FitTrace:
    '''
    Per-iteration record of a fit. Iteration numbers are strictly
    increasing; row 0 is the starting point. When `sink` is set every row
    is handed to it as soon as it is recorded.
    '''
    rows: List[TraceRow] = field(default_factory=list)
    # Non-fatal conditions hit during the fit (line-search stalls, clamped quantiles, ...)
    warnings: List[str] = field(default_factory=list)
    converged: bool = False
    # The line search found no acceptable step away from a stationary point
    stalled: bool = False
    sink: Optional[RowSink] = field(default=None, repr=False, compare=False)

    @classmethod
    def for_seed(cls, sinks: Optional[SinkFactory], seed: int) -> "FitTrace":
        return cls(sink=sinks(seed) if sinks is not None else None)

    def append(self, row: TraceRow) -> None:
        if self.rows and row.iter <= self.rows[-1].iter:
            raise ValueError("Trace iterations must increase, got {} after {}".format(row.iter, self.rows[-1].iter))
        self.rows.append(row)
        if self.sink is not None:
            self.sink(row)

    def record(self, loglik: float, grad_norm: float, step: float, elapsed_ms: float, exact_loglik: Optional[float] = None) -> TraceRow:
        row = TraceRow(self.next_iter(), float(loglik), float(grad_norm), float(step), float(elapsed_ms), exact_loglik)
        self.append(row)
        return row

    def next_iter(self) -> int:
        return self.rows[-1].iter + 1 if self.rows else 0

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self) -> Iterator[TraceRow]:
        return iter(self.rows)

    def __getitem__(self, k: int) -> TraceRow:
        return self.rows[k]

    @property
    def has_exact_column(self) -> bool:
        return any(r.exact_loglik is not None for r in self.rows)

    @property
    def logliks(self) -> List[float]:
        return [r.loglik for r in self.rows]

    @property
    def final_loglik(self) -> float:
        return self.rows[-1].loglik

    @property
    def iterations(self) -> int:
        return self.rows[-1].iter if self.rows else 0

    @property
    def elapsed_ms(self) -> float:
        return self.rows[-1].elapsed_ms if self.rows else 0.0

    def is_non_decreasing(self, slack: float = 1e-10) -> bool:
        ll = self.logliks
        return all(b >= a - slack for a, b in zip(ll, ll[1:]))

    def warn(self, message: str) -> None:
        self.warnings.append(message)

    def stop_stalled(self, grad_norm: float, loglik: float) -> None:
        '''A failed line search ends the fit; it only counts as converged at a stationary point.'''
        if grad_norm <= STATIONARY_GRAD * (1.0 + abs(loglik)):
            self.converged = True
        else:
            self.stalled = True


@dataclass
class FitResult:
    '''Outcome of one fitted restart; `params` is a GmmParams or MfaParams.'''
    params: object
    trace: FitTrace
    labels: object
    loglik: float
    seed: int = 0
    method: str = ""


@dataclass
class Dataset:
    X: object
    labels: Optional[object] = None

    @property
    def shape(self):
        return self.X.shape
