"""
Scheduler service using APScheduler.
Periodically flushes the records of a running Monte Carlo experiment to a partial-results file.
"""
import logging
import time
from pathlib import Path
from typing import Callable, List, Union

from apscheduler.events import EVENT_JOB_ERROR, EVENT_JOB_EXECUTED
from apscheduler.executors.pool import ThreadPoolExecutor
from apscheduler.schedulers.background import BackgroundScheduler
from apscheduler.triggers.interval import IntervalTrigger

from ddpc_lab.models import RunRecord
from ddpc_lab.storage import write_json

logger = logging.getLogger(__name__)

CHECKPOINT_JOB_ID = "mc_checkpoint"


class SchedulerService:
    """Service for checkpointing partial Monte Carlo results."""

    def __init__(self,
                 records_source: Callable[[], List[RunRecord]],
                 checkpoint_path: Union[str, Path],
                 checkpoint_interval: int = 30):
        """Initialize the scheduler service.

        Args:
            records_source: Callable returning the records finished so far
            checkpoint_path: JSON file the partial records are written to
            checkpoint_interval: Seconds between checkpoints
        """
        self.records_source = records_source
        self.checkpoint_path = Path(checkpoint_path)
        self.checkpoint_interval = checkpoint_interval

        executors = {
            "default": ThreadPoolExecutor(max_workers=1)
        }

        job_defaults = {
            "coalesce": True,
            "max_instances": 1,
            "misfire_grace_time": 15
        }

        self.scheduler = BackgroundScheduler(
            executors=executors,
            job_defaults=job_defaults,
            timezone="UTC"
        )

        self.scheduler.add_listener(
            self._job_listener,
            EVENT_JOB_EXECUTED | EVENT_JOB_ERROR
        )

        self.running = False

        logger.info(f"Scheduler service initialized with {checkpoint_interval}s checkpoint interval")

    def _job_listener(self, event):
        """Event listener for scheduler job events."""
        if hasattr(event, "exception") and event.exception:
            logger.error(f"Job {event.job_id} raised an exception: {event.exception}")
        else:
            if hasattr(event, "retval"):
                logger.debug(f"Job {event.job_id} executed successfully: {event.retval}")

    def write_checkpoint(self) -> bool:
        """Write the records finished so far.

        Returns:
            True if the checkpoint was written
        """
        start_time = time.time()
        try:
            records = self.records_source()
            write_json(self.checkpoint_path, {"partial": True, "records": [r.to_dict() for r in records]})
            logger.info(f"Checkpoint with {len(records)} records written in {time.time() - start_time:.2f}s")
            return True
        except Exception as e:
            logger.error(f"Error writing checkpoint: {e}", exc_info=True)
            return False

    def start(self):
        """Start the periodic checkpoint job."""
        if self.running:
            logger.warning("Scheduler is already running")
            return

        try:
            self.scheduler.add_job(
                self.write_checkpoint,
                trigger=IntervalTrigger(seconds=self.checkpoint_interval),
                id=CHECKPOINT_JOB_ID,
                name="Monte Carlo checkpoint",
                replace_existing=True
            )
            self.scheduler.start()
            self.running = True
            logger.info(f"Scheduler started, checkpointing to {self.checkpoint_path}")

        except Exception as e:
            logger.error(f"Failed to start scheduler: {e}", exc_info=True)

    def stop(self, flush: bool = True):
        """Stop the scheduler, optionally writing one last checkpoint."""
        if not self.running:
            logger.warning("Scheduler is not running")
            return

        try:
            self.scheduler.shutdown(wait=False)
            self.running = False
            logger.info("Scheduler stopped")
        except Exception as e:
            logger.error(f"Error stopping scheduler: {e}", exc_info=True)

        if flush:
            self.write_checkpoint()
