import os

from clearml import Task

from .log import get_logger

PROJECT_NAME = "EvoMoE_Desk_Lab"

log = get_logger(__name__)


def clearml_enabled(config):
    return config.logging.clearml or os.getenv("EVOMOE_CLEARML", "0") == "1"


class Tracker:
    """Mirrors metric lines to a ClearML task; a no-op when tracking is off.

    Inside a process that already runs a task (an experiment driver) the
    scalars go to that task, which is left open on ``close``.
    """

    SCALARS = ("task_loss", "balance_loss", "temperature", "mean_selected_experts", "load_cv", "max_load_share")

    def __init__(self, task_name, enabled=False, config=None):
        self.task = None
        self.owned = False
        if not enabled:
            return
        current = Task.current_task()
        if current is not None:
            self.task = current
            log.info("Reporting %s to running ClearML task %s", task_name, current.id)
            return
        self.task = Task.init(project_name=PROJECT_NAME, task_name=task_name, reuse_last_task_id=False)
        self.owned = True
        if config is not None:
            self.task.connect(config.to_dict(), name="config")
        log.info("Reporting to ClearML task %s", self.task.id)

    def report(self, line):
        if self.task is None:
            return
        logger = self.task.get_logger()
        for key in self.SCALARS:
            value = line.get(key)
            if value is not None:
                logger.report_scalar(title=key, series=line["phase"], value=value, iteration=line["iter"])

    def report_scalar(self, title, series, value, iteration=0):
        if self.task is not None:
            self.task.get_logger().report_scalar(title=title, series=series, value=value, iteration=iteration)

    def close(self):
        if self.task is not None and self.owned:
            self.task.close()
        self.task = None
