"""Command-line front end: FE demo, attacks, sweeps, and split training.

Progress goes to stderr; results go to stdout or files so runs can be
scripted. Exit codes: 0 success, 1 runtime failure, 2 usage error. Every
flag can also arrive from a --config key=value file or a FELEAK_<FLAG>
environment variable (environment beats file, the command line beats both).
"""

import argparse
import os
import sys
from concurrent import futures

import numpy as np

from . import mitig2
from .attack import (
    FRACTIONS,
    AugmentationSpec,
    SolveLimits,
    attack_sweep,
    recover,
)
from .data_io import ImageSample, parse_idx, read_pgm, write_csv, write_pgm
from .fe_pipeline import load_instance, simulate_dense_instance
from .group_crypto import (
    MIN_BITS,
    PLAINTEXT_BOUND,
    feip_decrypt,
    feip_encrypt,
    feip_keyderive,
    setup,
)
from .mitig2 import (
    HandshakeError,
    ServerAgent,
    TrainConfig,
    TrainData,
    TrainingDiverged,
    save_client_checkpoint,
    save_server_checkpoint,
    train_split,
)
from .wire import ProtocolError, SocketTransport, TransportClosed

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

ENV_PREFIX = "FELEAK_"
AUG_MODES = {"none": "none", "eq": "equations", "ineq": "inequalities"}
SWEEP_HEADER = ("layer_width", "aug_mode", "fraction", "threshold",
                "mse", "runtime_ms", "status")


class UsageError(Exception):
    """Bad flags or inputs, reported before any heavy work."""


def note(msg):
    print(msg, file=sys.stderr)


def parse_fraction(token):
    token = str(token).strip()
    try:
        if "/" in token:
            num, den = token.split("/", 1)
            value = float(int(num)) / float(int(den))
        else:
            value = float(token)
    except (ValueError, ZeroDivisionError):
        raise UsageError("cannot parse fraction %r" % token) from None
    for good in FRACTIONS.values():
        if abs(value - good) < 1e-9:
            return good
    raise UsageError("fraction %r is not one of %s"
                     % (token, "1/2, 1/4, 1/9, 1/16"))


def parse_topology(token):
    try:
        n, h1, n_out = (int(part) for part in str(token).split(","))
    except ValueError:
        raise UsageError("topology must be n,h1,n_out, got %r"
                         % token) from None
    return n, h1, n_out


def parse_endpoint(token):
    host, _, port = str(token).rpartition(":")
    if not host or not port.isdigit():
        raise UsageError("endpoint must be host:port, got %r" % token)
    return host, int(port)


def synthetic_image(side=32, seed=0):
    """Smooth random blobs in [0,1], the stand-in for a natural image."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:side, 0:side] / max(side - 1, 1)
    img = np.full((side, side), 0.5)
    for _ in range(4):
        cx, cy = rng.uniform(0.1, 0.9, 2)
        width = rng.uniform(0.08, 0.3)
        img += rng.uniform(-0.45, 0.45) * np.exp(
            -((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * width ** 2))
    return np.clip(img, 0.02, 0.98)


def _augmentation(args):
    mode = AUG_MODES[args.aug]
    fraction = parse_fraction(args.fraction) if mode != "none" else 1 / 2
    return AugmentationSpec(mode=mode, fraction=fraction,
                            threshold=args.threshold)


def _limits(args):
    return SolveLimits(max_iter=args.max_iter, time_limit=args.time_limit)


# --- fe-demo -----------------------------------------------------------------

def cmd_fe_demo(args):
    if args.bits < MIN_BITS:
        raise UsageError("--bits must be at least %d" % MIN_BITS)
    if args.dim < 1 or args.trials < 1:
        raise UsageError("--dim and --trials must be positive")
    note("generating a %d-bit group..." % args.bits)
    params, mk = setup(args.dim, bits=args.bits, seed=args.seed)
    print("group bits=%d dim=%d bound=%d" % (args.bits, args.dim, args.bound))
    rng = np.random.default_rng(args.seed)
    entry = max(1, int(np.sqrt(args.bound // args.dim)))
    failures = 0
    for trial in range(args.trials):
        x = rng.integers(-entry, entry + 1, args.dim)
        y = rng.integers(-entry, entry + 1, args.dim)
        enc_seed = None if args.seed is None else args.seed * 1000 + trial
        ct = feip_encrypt(params, mk.mpk, x, bound=args.bound, seed=enc_seed)
        fk = feip_keyderive(params, mk.msk, y, bound=args.bound)
        got = feip_decrypt(params, ct, fk, bound=args.bound)
        want = int(np.dot(x, y))
        status = "ok" if got == want else "MISMATCH"
        failures += status != "ok"
        print("trial %d: x=%s y=%s decrypted=%d expected=%d %s"
              % (trial, x.tolist(), y.tolist(), got, want, status))
    if failures:
        print("%d of %d trials failed" % (failures, args.trials))
        return EXIT_FAILURE
    print("all %d trials verified" % args.trials)
    return EXIT_OK


# --- attack ------------------------------------------------------------------

def cmd_attack(args):
    if bool(args.instance) == bool(args.simulate):
        raise UsageError("pass an instance file or --simulate WIDTH, "
                         "not both or neither")
    x_true = None
    if args.simulate:
        if args.image:
            image = read_pgm(args.image).image()
        else:
            image = synthetic_image(side=args.side, seed=args.seed or 0)
        instance, x_true = simulate_dense_instance(args.simulate, image,
                                                   seed=args.seed)
        note("simulated instance: W %dx%d" % instance.W.shape)
    else:
        if not os.path.exists(args.instance):
            raise UsageError("no such instance file: %s" % args.instance)
        instance = load_instance(args.instance)
        note("loaded instance: W %dx%d" % instance.W.shape)
    report = recover(instance, aug=_augmentation(args), method=args.method,
                     limits=_limits(args))
    os.makedirs(args.out_dir, exist_ok=True)
    err = ""
    if report.solver_status == "solved":
        if x_true is not None:
            err = float(np.mean((report.x_hat - x_true) ** 2))
        if len(instance.input_shape) == 2:
            out_img = ImageSample(
                pixels=np.clip(report.x_hat, 0, 1),
                shape=instance.input_shape)
            write_pgm(out_img, os.path.join(args.out_dir, "recovered.pgm"))
            if x_true is not None:
                write_pgm(ImageSample(pixels=x_true,
                                      shape=instance.input_shape),
                          os.path.join(args.out_dir, "original.pgm"))
    write_csv(os.path.join(args.out_dir, "report.csv"),
              ("status", "runtime_ms", "iterations", "mse"),
              [(report.solver_status, "%.3f" % report.runtime_ms,
                report.iterations, err)])
    print("status=%s runtime_ms=%.3f mse=%s out=%s"
          % (report.solver_status, report.runtime_ms,
             err if err != "" else "n/a", args.out_dir))
    return EXIT_OK if report.solver_status == "solved" else EXIT_FAILURE


# --- sweep -------------------------------------------------------------------

def _sweep_cell(job):
    """One (width x augmentation grid) slab; top level so pools can pickle."""
    (width, mode, fractions, threshold, samples, side, seed, method,
     max_iter, time_limit) = job
    if mode == "none":
        grid = [AugmentationSpec(mode="none")]
    else:
        grid = [AugmentationSpec(mode=mode, fraction=f, threshold=threshold)
                for f in fractions]

    def factory(w):
        return [simulate_dense_instance(w, synthetic_image(side, seed + i),
                                        seed=seed + i)
                for i in range(samples)]

    rows = attack_sweep(factory, [width], grid, method=method,
                        limits=SolveLimits(max_iter, time_limit))
    return [[row[key] for key in SWEEP_HEADER] for row in rows]


def cmd_sweep(args):
    try:
        widths = [int(tok) for tok in args.widths.split(",") if tok]
    except ValueError:
        raise UsageError("cannot parse widths %r" % args.widths) from None
    if not widths:
        raise UsageError("need at least one width")
    fractions = [parse_fraction(tok)
                 for tok in args.fractions.split(",") if tok]
    if args.aug != "none" and not fractions:
        raise UsageError("need at least one fraction")
    if args.jobs < 1:
        raise UsageError("--jobs must be positive")
    jobs = [(width, AUG_MODES[args.aug], tuple(fractions), args.threshold,
             args.samples, args.side, args.seed, args.method,
             args.max_iter, args.time_limit)
            for width in widths]
    note("sweeping %d widths x %d cells each..."
         % (len(widths), max(1, len(fractions))))
    if args.jobs == 1:
        slabs = [_sweep_cell(job) for job in jobs]
    else:
        with futures.ProcessPoolExecutor(max_workers=args.jobs) as pool:
            slabs = list(pool.map(_sweep_cell, jobs))
    rows = [row for slab in slabs for row in slab]
    write_csv(args.out, SWEEP_HEADER, rows)
    print("wrote %d rows to %s" % (len(rows), args.out))
    return EXIT_OK


# --- split training ----------------------------------------------------------

def _shared_synthetic(config, count, seed):
    """The demo dataset formula both roles derive independently."""
    return mitig2.synthetic_dataset(config, train=count,
                                    test=max(1, count // 3),
                                    seed=0 if seed is None else seed)


def cmd_split_server(args):
    import socket

    n, h1, n_out = parse_topology(args.topology)
    config = TrainConfig(n=n, h1=h1, n_out=n_out, lr=args.lr, seed=args.seed)
    if bool(args.labels) == bool(args.synthetic):
        raise UsageError("pass --labels FILE or --synthetic COUNT")
    if args.labels:
        if not os.path.exists(args.labels):
            raise UsageError("no such label file: %s" % args.labels)
        with open(args.labels, "rb") as fh:
            labels = parse_idx(fh.read())
    else:
        labels = _shared_synthetic(config, args.synthetic, args.seed).y_train
    agent = ServerAgent(config, labels)
    srv = socket.socket()
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind((args.host, args.port))
    srv.listen(1)
    srv.settimeout(args.accept_timeout)
    print("listening on %s:%d" % srv.getsockname(), flush=True)
    try:
        conn, peer = srv.accept()
    except OSError:
        note("no client within %gs" % args.accept_timeout)
        return EXIT_FAILURE
    finally:
        srv.close()
    note("client connected from %s:%d" % peer)
    clean = agent.serve(SocketTransport(conn))
    if clean and args.save_server:
        save_server_checkpoint(args.save_server, agent.params)
        note("saved server parameters to %s" % args.save_server)
    print("session %s after %d batches"
          % ("complete" if clean else "failed", len(agent.losses)))
    return EXIT_OK if clean else EXIT_FAILURE


def cmd_split_client(args):
    host, port = parse_endpoint(args.connect)
    n, h1, n_out = parse_topology(args.topology)
    config = TrainConfig(n=n, h1=h1, n_out=n_out, epochs=args.epochs,
                         batch=args.batch, lr=args.lr, seed=args.seed)
    if bool(args.data) == bool(args.synthetic):
        raise UsageError("pass --data DIR or --synthetic COUNT")
    if args.data:
        from .data_io import load_mnist
        X_tr, y_tr, X_te, y_te = load_mnist(args.data)
        data = TrainData(X_train=X_tr, y_train=None, X_test=X_te,
                         y_test=y_te)
        if X_tr.shape[1] != config.n:
            raise UsageError("dataset rows have %d features, topology "
                             "says %d" % (X_tr.shape[1], config.n))
    else:
        full = _shared_synthetic(config, args.synthetic, args.seed)
        data = TrainData(X_train=full.X_train, y_train=None,
                         X_test=full.X_test, y_test=full.y_test)

    def factory():
        return SocketTransport.connect(host, port)

    note("training %d epochs of batch %d against %s:%d..."
         % (config.epochs, config.batch, host, port))
    model, metrics = train_split(config, data, transport=factory)
    if args.save_w1:
        save_client_checkpoint(args.save_w1, model.W1)
        note("saved W1 to %s" % args.save_w1)
    print("accuracy=%.4f wall_seconds=%.2f epochs=%d batch=%d"
          % (metrics["test_accuracy"], metrics["wall_seconds"],
             config.epochs, config.batch))
    return EXIT_OK


# --- plumbing ----------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="feleak",
        description="Input recovery from leaked first-layer products, and "
                    "the split-training mitigation.")
    parser.add_argument("--config", metavar="FILE",
                        help="key=value defaults, one per line")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fe-demo", help="encrypt, derive a key, decrypt, "
                                       "verify the inner product")
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--bits", type=int, default=256)
    p.add_argument("--bound", type=int, default=PLAINTEXT_BOUND)
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--seed", type=int)
    p.set_defaults(run=cmd_fe_demo)

    p = sub.add_parser("attack", help="recover an input from (W, Z1)")
    p.add_argument("instance", nargs="?",
                   help="attack-instance file from a real run")
    p.add_argument("--simulate", type=int, metavar="WIDTH",
                   help="build a random instance of this layer width")
    p.add_argument("--image", help="PGM ground truth for --simulate")
    p.add_argument("--side", type=int, default=32,
                   help="synthetic image side length")
    p.add_argument("--aug", choices=sorted(AUG_MODES), default="none")
    p.add_argument("--fraction", default="1/2")
    p.add_argument("--threshold", type=float, default=0.1)
    p.add_argument("--method", choices=["interior", "simplex"],
                   default="interior")
    p.add_argument("--max-iter", type=int)
    p.add_argument("--time-limit", type=float)
    p.add_argument("--out-dir", default="attack-out")
    p.add_argument("--seed", type=int)
    p.set_defaults(run=cmd_attack)

    p = sub.add_parser("sweep", help="MSE grid over widths and fractions")
    p.add_argument("--widths", default="350,500,750")
    p.add_argument("--fractions", default="1/16,1/9,1/4")
    p.add_argument("--aug", choices=sorted(AUG_MODES), default="ineq")
    p.add_argument("--threshold", type=float, default=0.1)
    p.add_argument("--samples", type=int, default=1,
                   help="synthetic images per cell")
    p.add_argument("--side", type=int, default=32)
    p.add_argument("--method", choices=["interior", "simplex"],
                   default="interior")
    p.add_argument("--max-iter", type=int)
    p.add_argument("--time-limit", type=float)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default="sweep.csv")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(run=cmd_sweep)

    p = sub.add_parser("split-server", help="serve the upper network half")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=9000)
    p.add_argument("--topology", default="784,300,10")
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--labels", help="IDX label file for training labels")
    p.add_argument("--synthetic", type=int, metavar="COUNT",
                   help="derive demo labels instead of loading them")
    p.add_argument("--accept-timeout", type=float, default=120.0)
    p.add_argument("--save-server", metavar="PATH")
    p.add_argument("--seed", type=int)
    p.set_defaults(run=cmd_split_server)

    p = sub.add_parser("split-client", help="train the first layer locally")
    p.add_argument("--connect", default="127.0.0.1:9000")
    p.add_argument("--data", help="MNIST directory (four IDX files)")
    p.add_argument("--synthetic", type=int, metavar="COUNT",
                   help="derive the demo dataset instead of loading one")
    p.add_argument("--topology", default="784,300,10")
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--batch", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--save-w1", metavar="PATH")
    p.add_argument("--seed", type=int)
    p.set_defaults(run=cmd_split_client)

    return parser


def _read_config_file(path):
    if not os.path.exists(path):
        raise UsageError("no such config file: %s" % path)
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError("%s:%d: expected key=value" % (path, lineno))
            key, value = line.split("=", 1)
            values[key.strip().replace("-", "_")] = value.strip()
    return values


def _collect_overrides(argv):
    values = {}
    if "--config" in argv:
        at = argv.index("--config")
        if at + 1 >= len(argv):
            raise UsageError("--config needs a path")
        values.update(_read_config_file(argv[at + 1]))
    for key, value in os.environ.items():
        if key.startswith(ENV_PREFIX) and key != ENV_PREFIX:
            values[key[len(ENV_PREFIX):].lower()] = value
    return values


def _apply_overrides(parser, overrides):
    """Rewrite subcommand defaults from config file and environment."""
    if not overrides:
        return
    actions = []
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for sp in action.choices.values():
                actions.extend(sp._actions)
    for action in actions:
        if action.dest in ("help", "run") or action.dest not in overrides:
            continue
        raw = overrides[action.dest]
        try:
            value = action.type(raw) if action.type else raw
        except ValueError:
            raise UsageError("bad value %r for %s" % (raw, action.dest)) \
                from None
        if action.choices and value not in action.choices:
            raise UsageError("%r is not a valid %s" % (raw, action.dest))
        action.default = value


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_overrides(parser, _collect_overrides(argv))
        args = parser.parse_args(argv)
        return args.run(args)
    except SystemExit as exc:  # argparse exits; normalize to a return
        return int(exc.code or 0)
    except UsageError as exc:
        note("error: %s" % exc)
        return EXIT_USAGE
    except (ValueError, OSError, HandshakeError, TrainingDiverged,
            ProtocolError, TransportClosed) as exc:
        note("error: %s" % exc)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
