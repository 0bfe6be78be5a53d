import multiprocessing as mp
from threading import Lock

from ssltr.schedule import Schedule


class BatchWorker(object):
    """Runs in the worker process; answers commands received over the pipe."""

    def __init__(self, conn, builder):
        self.conn = conn
        self.builder = builder
        self.alive = True
        self._process_commands()

    def _process_commands(self):
        while self.alive:
            name, args, kwargs = self.conn.recv()
            fn = getattr(self, name)
            self.conn.send(fn(*args, **kwargs))

    def build(self, iteration, batch_size):
        return self.builder(iteration, batch_size)

    def kill(self):
        self.alive = False


class Prefetcher(object):
    """
    Builds batches in a separate process, one iteration ahead of the caller.

    ``builder`` must be picklable and a pure function of ``(iteration, batch_size)``,
    so batches are identical with or without prefetching.
    """

    worker_class = BatchWorker

    def __init__(self, builder, schedule: Schedule):
        self.schedule = schedule
        self._ctx = mp.get_context("spawn")
        self._conn, child_conn = mp.Pipe()
        self._lock = Lock()
        self._pending = None
        self._process = self._ctx.Process(
            target=self.worker_class, args=(child_conn, builder), daemon=True
        )
        self._process.start()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_value, traceback):
        self.kill()

    def _request(self, iteration):
        self._conn.send(("build", (iteration, self.schedule.batch_at(iteration)), {}))
        self._pending = iteration

    def get(self, iteration):
        with self._lock:
            if self._pending is None:
                self._request(iteration)
            elif self._pending != iteration:
                self._conn.recv()
                self._request(iteration)
            batch = self._conn.recv()
            self._pending = None
            if iteration + 1 < self.schedule.total:
                self._request(iteration + 1)
            return batch

    def kill(self):
        with self._lock:
            if not self._process.is_alive():
                return
            if self._pending is not None:
                self._conn.recv()
                self._pending = None
            self._conn.send(("kill", (), {}))
            self._conn.recv()
            self._process.join()


__all__ = ["BatchWorker", "Prefetcher"]
