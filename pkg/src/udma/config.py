""" config.py
    The run-configuration key table and its parser.

    The table below is the single place a tunable is declared: its type,
    default, legal range and one line of help. Parsing a file checks every
    line against it; keys not in the table are rejected by name.

    File format:
        # comment
        key = value
"""
import logging
import math

from typeguard import typechecked

from udma.errors import ConfigError
from udma import taxonomy

logger = logging.getLogger(__name__)

INF = math.inf

# key: (type, default, low, high, help)
# ranges are inclusive unless the key appears in OPEN_LOW / OPEN_HIGH
config_key_table = {
    # projection
    "range_width":          (int,   2048,    1, INF,    "range image width U in pixels"),
    "range_height":         (int,   64,      1, INF,    "range image height V in pixels"),
    "fov_up_deg":           (float, 3.0,     0.0, 90.0, "vertical field of view above horizontal, degrees"),
    "fov_down_deg":         (float, 25.0,    0.0, 90.0, "vertical field of view below horizontal, degrees"),
    "input_range_scale":    (float, 0.02,    0.0, INF,  "multiplies r in the (r, r, i) network input"),

    # pre-segmentation
    "ransac_iterations":    (int,   200,     1, INF,    "RANSAC candidate planes"),
    "ransac_threshold":     (float, 0.15,    0.0, INF,  "RANSAC inlier distance, meters"),
    "ransac_max_tilt_deg":  (float, 8.0,     0.0, 90.0, "largest accepted ground tilt from horizontal, degrees"),
    "cluster_base_threshold": (float, 0.5,   0.0, INF,  "t0, base connection distance in meters"),
    "cluster_range_coeff":  (float, 0.01,    0.0, INF,  "alpha, connection distance growth per meter of range"),
    "wall_min_height":      (float, 2.5,     0.0, INF,  "vertical extent that makes a component a wall, meters"),
    "wall_min_spread":      (float, 4.0,     0.0, INF,  "largest covariance eigenvalue that makes a wall, m^2"),
    "car_box_length":       (float, 6.0,     0.0, INF,  "car bounding box, long horizontal side, meters"),
    "car_box_width":        (float, 3.0,     0.0, INF,  "car bounding box, short horizontal side, meters"),
    "car_box_height":       (float, 2.5,     0.0, INF,  "car bounding box, height, meters"),
    "car_min_points":       (int,   20,      1, INF,    "points above car_min_height needed for a car"),
    "car_min_height":       (float, 0.3,     0.0, INF,  "height above ground counted toward car_min_points"),

    # model
    "feature_dim":          (int,   16,      1, INF,    "d, pixel feature channels"),
    "base_channels":        (int,   8,       1, INF,    "channels of the first encoder stage"),
    "knn_k":                (int,   4,       1, INF,    "neighbors per node in the edge convolution"),
    "disc_hidden":          (int,   256,     1, INF,    "discriminator hidden width"),
    "use_ire":              (bool,  True,    None, None, "instance-wise relationship branch on/off"),

    # losses
    "lambda_ce":            (float, 1.0,     0.0, INF,  "weight of the source CE loss"),
    "lambda_sa":            (float, 0.001,   0.0, INF,  "weight of the scene adversarial generator term"),
    "lambda_ia":            (float, 0.001,   0.0, INF,  "weight of the instance adversarial generator term"),
    "lambda_car":           (float, 1.0,     0.0, INF,  "weight of the car CE term while fine-tuning"),
    "ce_literal_sum":       (bool,  False,   None, None, "CE summed over pixels instead of averaged"),
    "use_sa":               (bool,  True,    None, None, "scene alignment on/off"),
    "use_ia":               (bool,  True,    None, None, "instance alignment on/off"),

    # optimizers
    "lr_generator":         (float, 2.5e-4,  0.0, INF,  "SGD learning rate for the segmentation network"),
    "lr_discriminator":     (float, 1e-4,    0.0, INF,  "Adam learning rate for the discriminators"),
    "lr_fine_tune":         (float, 2.5e-4,  0.0, INF,  "SGD learning rate for the weak-label fine-tuning stage"),
    "adam_beta1":           (float, 0.9,     0.0, 1.0,  "Adam first moment decay"),
    "adam_beta2":           (float, 0.999,   0.0, 1.0,  "Adam second moment decay"),
    "adam_eps":             (float, 1e-8,    0.0, INF,  "Adam denominator epsilon"),

    # schedule
    "train_steps":          (int,   500,     0, INF,    "adversarial training steps"),
    "fine_tune_steps":      (int,   200,     0, INF,    "weak-label fine-tuning steps"),
    "seed":                 (int,   0,       0, INF,    "seed for every random draw in a run"),

    # data
    "source_root":          (str,   "data/source", None, None, "directory of source samples"),
    "target_root":          (str,   "data/target", None, None, "directory of target scans"),
    "label_map":            (str,   taxonomy.format_label_map(taxonomy.DEFAULT_LABEL_MAP), None, None,
                             "raw:train pairs, comma separated"),
    "label_map_file":       (str,   "",      None, None, "CSV with raw_id,train_id columns, replaces label_map"),

    # synthetic data
    "synth_scans":          (int,   8,       0, INF,    "target scans written by synth"),
    "synth_sources":        (int,   8,       0, INF,    "source samples written by synth"),
    "synth_eval_scans":     (int,   4,       1, INF,    "held-out scans and source samples for the experiment"),
    "synth_noise":          (float, 0.01,    0.0, INF,  "range noise sigma, meters"),
    "synth_shift_offset":   (float, 0.5,     -INF, INF, "source domain channel offset"),
    "synth_shift_scale":    (float, 2.0,     0.0, INF,  "source domain channel scale"),
    "synth_shift_channels": (str,   "0,1,2", None, None, "input channels the source shift applies to, comma separated"),
    "synth_max_range":      (float, 40.0,    0.0, INF,  "rays that hit nothing closer are dropped, meters"),
}

OPEN_LOW = {"input_range_scale", "ransac_threshold", "cluster_base_threshold", "lr_generator",
            "lr_discriminator", "lr_fine_tune", "adam_eps", "synth_shift_scale", "synth_max_range"}
OPEN_HIGH = {"adam_beta1", "adam_beta2"}

TRUE_WORDS = ("true", "1", "yes")
FALSE_WORDS = ("false", "0", "no")


class RunConfig(dict):
    """ validated key table values; attribute access is a read-only view """

    def __getattr__(self, key):
        try:
            return self[key]
        except KeyError:
            msg = f"unknown config key \"{key}\""
            raise AttributeError(msg)

    def label_map_dict(self) -> dict[int, int]:
        if self['label_map_file']:
            return taxonomy.read_label_map_csv(self['label_map_file'])
        return taxonomy.parse_label_map(self['label_map'])

    def shift_channels(self) -> tuple[int, ...]:
        return parse_channel_list(self['synth_shift_channels'])


def parse_channel_list(text, channels=3) -> tuple[int, ...]:
    """ "0,2" -> (0, 2); empty text is no channel """
    parsed = []
    for item in text.split(','):
        item = item.strip()
        if item == '':
            continue
        if not item.isdigit() or int(item) >= channels:
            msg = f"channel list \"{text}\": \"{item}\" is not a channel index in [0, {channels})"
            raise ConfigError(msg)
        if int(item) in parsed:
            msg = f"channel list \"{text}\" names channel {item} twice"
            raise ConfigError(msg)
        parsed.append(int(item))
    return tuple(sorted(parsed))


def describe_range(key) -> str:
    key_type, _, low, high, _ = config_key_table[key]
    if low is None:
        return f"{key_type.__name__}"
    left = '(' if key in OPEN_LOW else '['
    right = ')' if (key in OPEN_HIGH or high == INF) else ']'
    low_text = '-inf' if low == -INF else f"{low}"
    high_text = 'inf' if high == INF else f"{high}"
    return f"{left}{low_text}, {high_text}{right}"


def convert_value(key, text):
    key_type = config_key_table[key][0]
    text = text.strip()
    if key_type is bool:
        if text.lower() in TRUE_WORDS:
            return True
        if text.lower() in FALSE_WORDS:
            return False
        msg = f"config key \"{key}\" expects a boolean (true/false/1/0/yes/no), got \"{text}\""
        raise ConfigError(msg)
    if key_type is str:
        if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
            return text[1:-1]
        return text
    try:
        return key_type(text)
    except ValueError:
        msg = f"config key \"{key}\" expects {key_type.__name__}, got \"{text}\""
        raise ConfigError(msg)


def check_range(key, value):
    key_type, _, low, high, _ = config_key_table[key]
    if low is None:
        return
    if isinstance(value, float) and not math.isfinite(value):
        msg = f"config key \"{key}\" must be finite, got {value}; legal range {describe_range(key)}"
        raise ConfigError(msg)
    too_low = value <= low if key in OPEN_LOW else value < low
    too_high = value >= high if key in OPEN_HIGH else value > high
    if too_low or too_high:
        msg = f"config key \"{key}\" = {value} is outside the legal range {describe_range(key)}"
        raise ConfigError(msg)


def check_cross_keys(values):
    if values["fov_up_deg"] + values["fov_down_deg"] <= 0:
        msg = (f"fov_up_deg + fov_down_deg must be > 0, got "
               f"{values['fov_up_deg']} + {values['fov_down_deg']}")
        raise ConfigError(msg)
    # parse now so a bad map fails at load time, not mid-run
    if not values["label_map_file"]:
        taxonomy.parse_label_map(values["label_map"])
    parse_channel_list(values["synth_shift_channels"])


def default_config() -> RunConfig:
    return RunConfig({key: spec[1] for key, spec in config_key_table.items()})


@typechecked
def build_config(overrides: dict) -> RunConfig:
    """ defaults updated with already-typed overrides, all validated """
    values = default_config()
    for key, value in overrides.items():
        if key not in config_key_table:
            msg = f"unknown config key \"{key}\""
            raise ConfigError(msg)
        key_type = config_key_table[key][0]
        if key_type is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if not isinstance(value, key_type) or (key_type is int and isinstance(value, bool)):
            msg = f"config key \"{key}\" expects {key_type.__name__}, got {type(value).__name__}"
            raise ConfigError(msg)
        check_range(key, value)
        values[key] = value
    check_cross_keys(values)
    return values


@typechecked
def parse_config_text(text: str, source: str = "<string>") -> RunConfig:
    overrides = {}
    for line_number, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split('#', 1)[0].strip()
        if line == '':
            continue
        if '=' not in line:
            msg = f"{source}:{line_number}: expected \"key = value\", got \"{raw_line.strip()}\""
            raise ConfigError(msg)
        key, value_text = line.split('=', 1)
        key = key.strip()
        if key not in config_key_table:
            msg = f"{source}:{line_number}: unknown config key \"{key}\""
            raise ConfigError(msg)
        if key in overrides:
            msg = f"{source}:{line_number}: config key \"{key}\" given twice"
            raise ConfigError(msg)
        overrides[key] = convert_value(key, value_text)
    logger.info(f"config {source}: {len(overrides)} keys set, {len(config_key_table) - len(overrides)} defaulted")
    return build_config(overrides)


def format_config(cfg) -> str:
    """ writes a config back out in key table order, readable by parse_config_text """
    lines = []
    for key, spec in config_key_table.items():
        value = cfg[key]
        if spec[0] is bool:
            value = 'true' if value else 'false'
        elif spec[0] is float:
            value = repr(float(value))
        lines.append(f"{key} = {value}  # {spec[4]}")
    return '\n'.join(lines) + '\n'
