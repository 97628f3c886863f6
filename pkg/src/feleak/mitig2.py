"""Split training: the client owns the first layer, the server owns the rest.

The client computes Z1 = X @ W1 and ships it; the server adds its bias, runs
ReLU, the output layer, softmax and cross-entropy, then returns the raw
per-sample gradient dZ1. Each side scales its own gradients by the batch
size and steps with SGD. Raw inputs and W1 never cross the wire in either
direction, which is the entire point.

A monolithic trainer drives the identical math without a transport, so the
two paths can be compared bit for bit. The epilogue turns a trained W1 into
per-row inner-product keys for encrypted inference.
"""

import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import wire
from .fe_pipeline import (
    PIXEL_SPEC,
    WEIGHT_SCALE,
    first_layer_decrypt,
    derive_layer_keys,
    quantize,
    safe_dlog_bound,
    weight_spec,
    z1_spec,
)
from .group_crypto import BsgsTable
from .wire import (
    BWD_DZ1,
    DONE_BAD_TOPOLOGY,
    DONE_BAD_VERSION,
    DONE_ERROR,
    DONE_OK,
    EVAL_REQ,
    EVAL_RESP,
    FWD_Z1,
    PROTOCOL_VERSION,
    InProcessTransport,
    TransportClosed,
    WireMessage,
    done_code,
    done_message,
    hello_message,
    parse_hello,
)

HANDSHAKE_ATTEMPTS = 3


class TrainingDiverged(Exception):
    """Loss became non-finite, or the peer aborted the run."""


class HandshakeError(Exception):
    """No usable HELLO exchange within the retry budget."""


@dataclass
class TrainConfig:
    n: int = 784
    h1: int = 300
    n_out: int = 10
    epochs: int = 5
    batch: int = 10
    lr: float = 0.1
    seed: int = None

    def __post_init__(self):
        if min(self.n, self.h1, self.n_out, self.batch) < 1 or self.epochs < 0:
            raise ValueError("bad topology or schedule")

    def topology(self):
        return (self.n, self.h1, self.n_out)

    def server_seed(self):
        # distinct stream from the client's W1 draw
        return None if self.seed is None else self.seed + 1


@dataclass
class ServerParams:
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray


@dataclass
class SplitModel:
    W1: np.ndarray               # n x h1, never serialized to the server
    server: ServerParams         # None when only the client side is visible
    config: TrainConfig


@dataclass
class TrainData:
    X_train: np.ndarray
    y_train: np.ndarray          # None on a client that outsources labels
    X_test: np.ndarray
    y_test: np.ndarray


@dataclass
class LeakageAudit:
    b: int
    n: int
    m: int
    unknowns: int
    observations: int
    linear: bool


@dataclass
class ForwardCache:
    server: ServerParams
    active: np.ndarray           # ReLU mask of Z1 + b1
    H: np.ndarray
    P: np.ndarray


@dataclass
class ServerGrads:
    dW2: np.ndarray
    db2: np.ndarray
    db1: np.ndarray
    loss: float


def init_client(config: TrainConfig) -> np.ndarray:
    rng = np.random.default_rng(config.seed)
    limit = 1.0 / np.sqrt(config.n)
    return rng.uniform(-limit, limit,
                       (config.n, config.h1)).astype(np.float32)


def init_server(config: TrainConfig) -> ServerParams:
    rng = np.random.default_rng(config.server_seed())
    limit = 1.0 / np.sqrt(config.h1)
    W2 = rng.uniform(-limit, limit,
                     (config.h1, config.n_out)).astype(np.float32)
    return ServerParams(b1=np.zeros(config.h1, dtype=np.float32),
                        W2=W2,
                        b2=np.zeros(config.n_out, dtype=np.float32))


def client_forward(W1, X):
    """Z1 = X @ W1, the only thing the client ever sends about its data."""
    X = np.atleast_2d(np.asarray(X))
    if X.shape[1] != W1.shape[0]:
        raise ValueError("inputs have %d features, W1 expects %d"
                         % (X.shape[1], W1.shape[0]))
    return X @ W1


def _softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def server_forward(Z1, server: ServerParams):
    Z1 = np.atleast_2d(np.asarray(Z1))
    if Z1.shape[1] != server.b1.shape[0]:
        raise ValueError("Z1 width %d, server expects %d"
                         % (Z1.shape[1], server.b1.shape[0]))
    A1 = Z1 + server.b1
    active = A1 > 0
    H = np.maximum(A1, 0)
    P = _softmax(H @ server.W2 + server.b2)
    return P, ForwardCache(server=server, active=active, H=H, P=P)


def server_backward(cache: ForwardCache, labels):
    """Cross-entropy gradients; dZ1 comes back raw, one row per sample.

    The 1/batch factor is applied by whichever side owns the parameter, so
    the wire carries per-sample quantities only.
    """
    P, H = cache.P, cache.H
    m, n_out = P.shape
    labels = np.asarray(labels)
    if labels.shape != (m,):
        raise ValueError("need %d labels, got shape %s" % (m, labels.shape))
    if labels.min() < 0 or labels.max() >= n_out:
        raise ValueError("labels outside [0, %d)" % n_out)
    rows = np.arange(m)
    with np.errstate(divide="ignore"):  # underflowed P reads as inf loss
        loss = float(np.mean(-np.log(P[rows, labels])))
    dlogits = P.copy()
    dlogits[rows, labels] -= 1.0
    dW2 = H.T @ dlogits / np.asarray(m, dtype=P.dtype)
    db2 = dlogits.mean(axis=0)
    dZ1 = (dlogits @ cache.server.W2.T) * cache.active
    db1 = dZ1.mean(axis=0)
    return dZ1, ServerGrads(dW2=dW2, db2=db2, db1=db1, loss=loss)


def apply_server_grads(server: ServerParams, grads: ServerGrads, lr):
    server.W2 -= lr * grads.dW2
    server.b2 -= lr * grads.db2
    server.b1 -= lr * grads.db1


def client_update(W1, dZ1, X, lr):
    X = np.atleast_2d(np.asarray(X))
    dZ1 = np.atleast_2d(np.asarray(dZ1))
    if dZ1.shape != (X.shape[0], W1.shape[1]):
        raise ValueError("dZ1 shape %s does not match batch %d x %d"
                         % (dZ1.shape, X.shape[0], W1.shape[1]))
    dW1 = X.T @ dZ1 / np.asarray(X.shape[0], dtype=W1.dtype)
    return W1 - lr * dW1


def predict_classes(W1, server: ServerParams, X, batch):
    chunks = []
    for start in range(0, len(X), batch):
        P, _ = server_forward(client_forward(W1, X[start:start + batch]),
                              server)
        chunks.append(P.argmax(axis=1))
    return (np.concatenate(chunks) if chunks
            else np.zeros(0, dtype=np.int64))


def _accuracy(predicted, truth):
    if truth is None:
        return float("nan")
    truth = np.asarray(truth)
    if truth.size == 0:
        return float("nan")
    return float(np.mean(predicted == truth))


class ServerAgent:
    """Reactive server half: answers one transport until DONE.

    Holds the training labels (the client never sends any) and walks them in
    dataset order, wrapping at the end of each epoch, so the schedule stays
    implicit in the message stream.
    """

    def __init__(self, config: TrainConfig, labels):
        self.config = config
        self.params = init_server(config)
        self.labels = np.asarray(labels, dtype=np.int64)
        if self.labels.size == 0:
            raise ValueError("server needs training labels")
        self.losses = []
        self._cursor = 0

    def _next_labels(self, count):
        n = self.labels.size
        got = []
        while count:
            take = min(count, n - self._cursor)
            got.append(self.labels[self._cursor:self._cursor + take])
            self._cursor = (self._cursor + take) % n
            count -= take
        return np.concatenate(got)

    def _handshake(self, transport) -> bool:
        version, *topology = parse_hello(transport.recv())
        if version != PROTOCOL_VERSION:
            transport.send(done_message(DONE_BAD_VERSION))
            return False
        if tuple(topology) != self.config.topology():
            transport.send(done_message(DONE_BAD_TOPOLOGY))
            return False
        transport.send(hello_message(*self.config.topology()))
        return True

    def serve(self, transport) -> bool:
        """True after a clean DONE, False on refusal or a vanished peer."""
        try:
            if not self._handshake(transport):
                return False
            while True:
                message = transport.recv()
                if message.type == wire.DONE:
                    transport.send(done_message(DONE_OK))
                    return True
                if message.type == FWD_Z1:
                    Z1 = np.atleast_2d(message.payload)
                    labels = self._next_labels(Z1.shape[0])
                    _, cache = server_forward(Z1, self.params)
                    dZ1, grads = server_backward(cache, labels)
                    if not np.isfinite(grads.loss):
                        transport.send(done_message(DONE_ERROR))
                        raise TrainingDiverged("loss is %r" % grads.loss)
                    self.losses.append(grads.loss)
                    apply_server_grads(self.params, grads, self.config.lr)
                    transport.send(WireMessage(BWD_DZ1, dZ1))
                elif message.type == EVAL_REQ:
                    P, _ = server_forward(np.atleast_2d(message.payload),
                                          self.params)
                    transport.send(WireMessage(EVAL_RESP,
                                               P.argmax(axis=1)))
                else:
                    transport.send(done_message(DONE_ERROR))
                    raise TrainingDiverged("unexpected message type %d"
                                           % message.type)
        except TransportClosed:
            return False  # peer went away; nothing left to serve
        finally:
            transport.close()


def _connect(transport_source, config: TrainConfig):
    """HELLO with retries; a refusal is final, a dead peer is retried."""
    last = None
    for attempt in range(HANDSHAKE_ATTEMPTS):
        try:
            transport = (transport_source() if callable(transport_source)
                         else transport_source)
            transport.send(hello_message(*config.topology()))
            reply = transport.recv()
            if reply.type == wire.DONE:
                raise HandshakeError("server refused: code %d"
                                     % done_code(reply))
            expected = (PROTOCOL_VERSION,) + config.topology()
            if parse_hello(reply) != expected:
                raise HandshakeError("server acknowledged a different "
                                     "topology")
            return transport
        except (TransportClosed, OSError) as exc:
            last = exc
            time.sleep(0.05 * (attempt + 1))
    raise HandshakeError("no handshake after %d attempts (%s)"
                         % (HANDSHAKE_ATTEMPTS, last))


def client_train(config: TrainConfig, data: TrainData, transport_source):
    """Drive the client side of a run; labels for training never leave
    the server, labels for the held-out test set never leave the client."""
    started = time.perf_counter()
    transport = _connect(transport_source, config)
    X_train = np.asarray(data.X_train, dtype=np.float32)
    X_test = np.asarray(data.X_test, dtype=np.float32)
    W1 = init_client(config)
    fwd = bwd = evals = 0
    floats_forward = 0
    try:
        for _ in range(config.epochs):
            for start in range(0, len(X_train), config.batch):
                X = X_train[start:start + config.batch]
                Z1 = client_forward(W1, X)
                transport.send(WireMessage(FWD_Z1, Z1))
                fwd += 1
                floats_forward += Z1.size
                reply = transport.recv()
                if reply.type == wire.DONE:
                    raise TrainingDiverged("server aborted with code %d"
                                           % done_code(reply))
                if reply.type != BWD_DZ1:
                    raise TrainingDiverged("unexpected reply type %d"
                                           % reply.type)
                bwd += 1
                W1 = client_update(W1, reply.payload, X, config.lr)
        predicted = []
        for start in range(0, len(X_test), config.batch):
            Z1 = client_forward(W1, X_test[start:start + config.batch])
            transport.send(WireMessage(EVAL_REQ, Z1))
            evals += 1
            reply = transport.recv()
            if reply.type != EVAL_RESP:
                raise TrainingDiverged("unexpected reply type %d"
                                       % reply.type)
            predicted.append(reply.payload.astype(np.int64))
        transport.send(done_message(DONE_OK))
        try:
            transport.recv()  # the server's closing DONE
        except TransportClosed:
            pass
    finally:
        transport.close()
    predicted = (np.concatenate(predicted) if predicted
                 else np.zeros(0, dtype=np.int64))
    metrics = {
        "test_accuracy": _accuracy(predicted, data.y_test),
        "wall_seconds": time.perf_counter() - started,
        "epochs": config.epochs,
        "batch_size": config.batch,
        "train_samples": len(X_train),
        "fwd_messages": fwd,
        "bwd_messages": bwd,
        "eval_messages": evals,
        "floats_sent_forward": floats_forward,
    }
    return W1, metrics


def train_split(config: TrainConfig, data: TrainData, transport=None):
    """Full split run. Without a transport, spin up the server half on a
    thread over an in-process channel and return both halves; with one,
    act as the client only (the server is someone else's process)."""
    if transport is not None:
        W1, metrics = client_train(config, data, transport)
        return SplitModel(W1=W1, server=None, config=config), metrics

    if data.y_train is None:
        raise ValueError("in-process training needs labels for the server")
    client_end, server_end = InProcessTransport.pair()
    agent = ServerAgent(config, data.y_train)
    failure = []

    def run_server():
        try:
            agent.serve(server_end)
        except Exception as exc:       # surfaced after join
            failure.append(exc)

    thread = threading.Thread(target=run_server, name="split-server")
    thread.start()
    try:
        W1, metrics = client_train(config, data, client_end)
    finally:
        client_end.close()
        thread.join(timeout=60)
    if failure:
        raise failure[0]
    metrics["transcript_bytes"] = len(client_end.transcript())
    model = SplitModel(W1=W1, server=agent.params, config=config)
    return model, metrics


def train_monolithic(config: TrainConfig, data: TrainData):
    """Single-process reference running the same math in the same order."""
    started = time.perf_counter()
    X_train = np.asarray(data.X_train, dtype=np.float32)
    X_test = np.asarray(data.X_test, dtype=np.float32)
    labels = np.asarray(data.y_train, dtype=np.int64)
    W1 = init_client(config)
    server = init_server(config)
    losses = []
    for _ in range(config.epochs):
        for start in range(0, len(X_train), config.batch):
            X = X_train[start:start + config.batch]
            y = labels[start:start + config.batch]
            Z1 = client_forward(W1, X)
            _, cache = server_forward(Z1, server)
            dZ1, grads = server_backward(cache, y)
            if not np.isfinite(grads.loss):
                raise TrainingDiverged("loss is %r" % grads.loss)
            losses.append(grads.loss)
            apply_server_grads(server, grads, config.lr)
            W1 = client_update(W1, dZ1, X, config.lr)
    predicted = predict_classes(W1, server, X_test, config.batch)
    metrics = {
        "test_accuracy": _accuracy(predicted, data.y_test),
        "wall_seconds": time.perf_counter() - started,
        "epochs": config.epochs,
        "batch_size": config.batch,
        "train_samples": len(X_train),
        "losses": losses,
    }
    return SplitModel(W1=W1, server=server, config=config), metrics


def synthetic_dataset(config: TrainConfig, train=600, test=200,
                      seed=0, spread=0.05) -> TrainData:
    """Separable class blobs in the unit box, for demos and loopback runs.

    Deterministic in (topology, counts, seed), so a client and a server can
    each derive the half they own from the same flags.
    """
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.2, 0.8, (config.n_out, config.n))

    def draw(count):
        y = rng.integers(0, config.n_out, count)
        X = centers[y] + spread * rng.normal(size=(count, config.n))
        return np.clip(X, 0, 1).astype(np.float32), y.astype(np.int64)

    X_train, y_train = draw(train)
    X_test, y_test = draw(test)
    return TrainData(X_train=X_train, y_train=y_train,
                     X_test=X_test, y_test=y_test)


def leakage_audit(b, n, m) -> LeakageAudit:
    """What the server observes versus what it would need to invert.

    Per batch it sees b*m inner products of b*n unknown inputs with n*m
    unknown weights; the system is bilinear in those unknowns, never linear,
    whatever the counts say.
    """
    if min(b, n, m) < 1:
        raise ValueError("dimensions must be positive")
    return LeakageAudit(b=b, n=n, m=m,
                        unknowns=b * n + n * m,
                        observations=b * m,
                        linear=False)


def save_client_checkpoint(path, W1):
    wire.save_tensors(path, [W1])


def load_client_checkpoint(path) -> np.ndarray:
    (W1,) = wire.load_tensors(path)
    return W1


def save_server_checkpoint(path, server: ServerParams):
    wire.save_tensors(path, [server.b1, server.W2, server.b2])


def load_server_checkpoint(path) -> ServerParams:
    b1, W2, b2 = wire.load_tensors(path)
    return ServerParams(b1=b1, W2=W2, b2=b2)


class InferenceServer:
    """Server half of encrypted inference: decrypt Z1 per row, then the
    usual forward pass. Sees functional keys and ciphertexts, never inputs."""

    def __init__(self, group, keys, spec, server: ServerParams, bound):
        self.group = group
        self.keys = keys
        self.spec = spec
        self.server = server
        self.bound = bound
        self.table = BsgsTable(group, bound)

    def classify(self, ciphertext) -> int:
        z1 = first_layer_decrypt(self.group, ciphertext, self.keys,
                                 self.spec, self.bound, self.table)
        P, _ = server_forward(z1.astype(np.float32)[None, :], self.server)
        return int(P.argmax(axis=1)[0])


def secure_inference_setup(model: SplitModel, group, msk,
                           weight_scale=WEIGHT_SCALE, bound_cap=2 ** 40):
    """Quantize the trained W1 into per-row functional keys.

    Returns (keys, InferenceServer). The dlog bound is sized from the worst
    integer inner product; past bound_cap the table would not be buildable
    at desk scale, so that is refused rather than attempted.
    """
    if model.server is None:
        raise ValueError("inference needs the server parameters")
    W1 = np.asarray(model.W1, dtype=np.float64)
    limit = float(np.abs(W1).max()) or 1.0
    wspec = weight_spec(limit, weight_scale)
    W_int = quantize(W1.T, wspec)
    bound = safe_dlog_bound(W_int, PIXEL_SPEC.max_int())
    if bound > bound_cap:
        raise ValueError("dlog bound %d exceeds cap %d; lower the weight "
                         "scale" % (bound, bound_cap))
    keys = derive_layer_keys(group, msk, W_int, bound=wspec.max_int())
    spec = z1_spec(PIXEL_SPEC, wspec)
    return keys, InferenceServer(group, keys, spec, model.server, bound)
