import json
from typing import Optional

from marshmallow import Schema, fields, validate, EXCLUDE
from marshmallow.exceptions import ValidationError

from errors import ConfigError
from logger import logger


class MixfitSchema(Schema):
    class Meta:
        unknown = EXCLUDE


class FitConfigSchema(MixfitSchema):
    learning_rate = fields.Float(validate=validate.Range(min=0, min_inclusive=False), metadata={"description": "Step size of fixed-rate gradient ascent."})
    max_iters = fields.Integer(validate=validate.Range(min=1), metadata={"description": "Maximum optimizer iterations."})
    tol = fields.Float(validate=validate.Range(min=0), metadata={"description": "Relative log-likelihood change that counts as converged."})
    line_search = fields.Boolean(metadata={"description": "Backtrack until the Armijo condition holds."})
    seed = fields.Integer(validate=validate.Range(min=0), metadata={"description": "Seed of the first restart; restart r uses seed + r."})
    restarts = fields.Integer(validate=validate.Range(min=1), metadata={"description": "Number of random initializations."})
    initial_step = fields.Float(validate=validate.Range(min=0, min_inclusive=False), metadata={"description": "First trial step of the Newton line search."})
    cg_max_iters = fields.Integer(allow_none=True, validate=validate.Range(min=1), metadata={"description": "Conjugate-gradient iterations per Newton step."})
    cg_forcing = fields.Float(allow_none=True, validate=validate.Range(min=0, min_inclusive=False), metadata={"description": "Fixed relative CG tolerance; overrides inexact_newton."})
    inexact_newton = fields.Boolean(metadata={"description": "Stop CG at the relative residual min(0.5, sqrt(|g|)) instead of solving the Newton system."})
    max_halvings = fields.Integer(validate=validate.Range(min=0), metadata={"description": "Maximum step halvings in the line search."})
    armijo_c = fields.Float(validate=validate.Range(min=0, max=1, min_inclusive=False, max_inclusive=False), metadata={"description": "Sufficient-increase constant."})
    latent_every = fields.Integer(validate=validate.Range(min=1), metadata={"description": "Iterations between latent recoveries of a copula fit."})


class QuantileGridConfigSchema(MixfitSchema):
    points = fields.Integer(validate=validate.Range(min=2), metadata={"description": "Grid points per axis."})
    tail_width = fields.Float(validate=validate.Range(min=0, min_inclusive=False), metadata={"description": "Grid half-width in component standard deviations."})
    bisection_steps = fields.Integer(validate=validate.Range(min=0), metadata={"description": "Bisection refinements after interpolation."})


class EmConfigSchema(MixfitSchema):
    max_iters = fields.Integer(validate=validate.Range(min=1), metadata={"description": "Maximum EM iterations."})
    tol = fields.Float(validate=validate.Range(min=0), metadata={"description": "Relative log-likelihood change that counts as converged."})
    seed = fields.Integer(validate=validate.Range(min=0), metadata={"description": "Seed of the first restart."})
    restarts = fields.Integer(validate=validate.Range(min=1), metadata={"description": "Number of random initializations."})
    min_covariance_floor = fields.Float(validate=validate.Range(min=0), metadata={"description": "Diagonal floor, relative to the average variance."})


class PinwheelConfigSchema(MixfitSchema):
    clusters = fields.Integer(validate=validate.Range(min=1), metadata={"description": "Number of arms."})
    per_cluster = fields.Integer(validate=validate.Range(min=1), metadata={"description": "Points per arm."})
    radial_std = fields.Float(validate=validate.Range(min=0, min_inclusive=False), metadata={"description": "Radial noise."})
    tangential_std = fields.Float(validate=validate.Range(min=0, min_inclusive=False), metadata={"description": "Angular noise."})
    swirl_rate = fields.Float(metadata={"description": "Extra rotation per unit radius."})
    seed = fields.Integer(validate=validate.Range(min=0), metadata={"description": "Generator seed."})


class settings(object):
    no_save_variables = []
    schema = MixfitSchema

    def to_json(self):
        json_data = {}
        for (name, value) in vars(self).items():
            if name not in self.no_save_variables and name[0] != "_":
                json_data[name] = value
        return json.dumps(json_data, indent="\t")

    def from_json(self, data):
        if isinstance(data, str):
            try:
                json_data = json.loads(data)
            except ValueError as e:
                raise ConfigError("Invalid {} JSON: {}".format(self.__class__.__name__, e))
        else:
            json_data = data
        declared = self.schema().fields
        values = {}
        for key, value in json_data.items():
            if key in self.__dict__ and key not in self.no_save_variables:
                if value is None and getattr(self, key) is not None:
                    continue
                #Need to fix the data type of value to match the declared one
                if isinstance(declared.get(key), fields.Integer) and isinstance(value, float):
                    if not value.is_integer():
                        raise ConfigError("Invalid {}: {} must be a whole number, got {!r}".format(self.__class__.__name__, key, value))
                    value = int(value)
                values[key] = value
            else:
                logger.debug("Ignoring unknown {} key {}".format(self.__class__.__name__, key))
        try:
            loaded = self.schema().load(values)
        except ValidationError as e:
            raise ConfigError("Invalid {}: {}".format(self.__class__.__name__, e.messages))
        for key in values:
            setattr(self, key, loaded.get(key, values[key]))
        return self.validate()

    def update(self, **kwargs):
        return self.from_json({k: v for k, v in kwargs.items() if v is not None})

    def validate(self):
        try:
            self.schema().load(json.loads(self.to_json()))
        except ValidationError as e:
            raise ConfigError("Invalid {}: {}".format(self.__class__.__name__, e.messages))
        return self

    def __repr__(self):
        return "{}({})".format(self.__class__.__name__, ", ".join("{}={!r}".format(k, v) for k, v in vars(self).items() if k[0] != "_"))

    def __eq__(self, other):
        return type(self) == type(other) and vars(self) == vars(other)


class FitConfig(settings):
    schema = FitConfigSchema

    def __init__(self, learning_rate: float = 1e-3, max_iters: int = 2000, tol: float = 1e-8, line_search: bool = True,
                 seed: int = 0, restarts: int = 1, initial_step: float = 1.0, cg_max_iters: Optional[int] = None,
                 cg_forcing: Optional[float] = None, inexact_newton: bool = False, max_halvings: int = 40, armijo_c: float = 1e-4,
                 latent_every: int = 1):
        self.learning_rate = learning_rate  # Gradient-ascent step size
        self.max_iters     = max_iters
        self.tol           = tol            # Stop when |df| / (1 + |f|) falls below this
        self.line_search   = line_search
        self.seed          = seed
        self.restarts      = restarts
        self.initial_step  = initial_step   # First trial step of the Newton line search
        self.cg_max_iters  = cg_max_iters   # None -> one per free parameter
        self.cg_forcing    = cg_forcing     # None -> inexact_newton decides
        self.inexact_newton = inexact_newton
        self.max_halvings  = max_halvings
        self.armijo_c      = armijo_c
        self.latent_every  = latent_every   # Copula fits: iterations between latent recoveries
        self.validate()

    @classmethod
    def for_gmm(cls, newton: bool = False, **kwargs):
        defaults = {"max_iters": 200} if newton else {}
        return cls(**{**defaults, **kwargs})

    @classmethod
    def for_gmcm(cls, **kwargs):
        return cls(**{"learning_rate": 1e-3, **kwargs})

    @classmethod
    def for_mfa(cls, newton: bool = False, **kwargs):
        # Factor-analyzer Newton stops CG by the inexact forcing sequence
        defaults = {"learning_rate": 1e-2, "max_iters": 200 if newton else 2000, "inexact_newton": newton}
        return cls(**{**defaults, **kwargs})


class QuantileGridConfig(settings):
    schema = QuantileGridConfigSchema

    def __init__(self, points: int = 1000, tail_width: float = 6.0, bisection_steps: int = 30):
        self.points          = points
        self.tail_width      = tail_width
        self.bisection_steps = bisection_steps
        self.validate()


class EmConfig(settings):
    schema = EmConfigSchema

    def __init__(self, max_iters: int = 500, tol: float = 1e-8, seed: int = 0, restarts: int = 1, min_covariance_floor: float = 1e-6):
        self.max_iters            = max_iters
        self.tol                  = tol
        self.seed                 = seed
        self.restarts             = restarts
        self.min_covariance_floor = min_covariance_floor  # Relative to the average per-column variance
        self.validate()


class PinwheelConfig(settings):
    schema = PinwheelConfigSchema

    def __init__(self, clusters: int = 3, per_cluster: int = 200, radial_std: float = 0.3, tangential_std: float = 0.05,
                 swirl_rate: float = 0.4, seed: int = 0):
        self.clusters       = clusters
        self.per_cluster    = per_cluster
        self.radial_std     = radial_std
        self.tangential_std = tangential_std
        self.swirl_rate     = swirl_rate
        self.seed           = seed
        self.validate()
