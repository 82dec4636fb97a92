"""
Service for exporting Monte Carlo results to InfluxDB.
"""
import logging
import math
from typing import List, Optional

from influxdb_client import InfluxDBClient, Point
from influxdb_client.client.write_api import SYNCHRONOUS

from ddpc_lab.models import McResult, RunRecord, VariantSummary

from ddpc_lab.config import (
    INFLUXDB_URL,
    INFLUXDB_TOKEN,
    INFLUXDB_ORG,
    INFLUXDB_BUCKET
)

logger = logging.getLogger(__name__)


class InfluxDBService:
    """Service for exporting Monte Carlo records and per-variant summaries to InfluxDB."""

    def __init__(self,
                 influx_url: Optional[str] = None,
                 influx_token: Optional[str] = None,
                 influx_org: Optional[str] = None,
                 influx_bucket: Optional[str] = None,
                 ):
        """Initialize the InfluxDB connection.

        Args:
            influx_url: InfluxDB URL
            influx_token: InfluxDB API token
            influx_org: InfluxDB organization
            influx_bucket: InfluxDB bucket name
        """
        self.influx_client = InfluxDBClient(
            url=influx_url or INFLUXDB_URL,
            token=influx_token or INFLUXDB_TOKEN,
            org=influx_org or INFLUXDB_ORG,
        )
        self.bucket = influx_bucket or INFLUXDB_BUCKET
        self.org = influx_org or INFLUXDB_ORG

        logger.info(f"InfluxDB service initialized for bucket: {self.bucket}")

    def _create_run_point(self, record: RunRecord, regime: str) -> Point:
        """Create a data point for one Monte Carlo run."""
        point = Point("mc_run").tag("variant", record.variant.value).tag("regime", regime)
        point.field("run_id", record.run_id)
        point.field("seed", record.seed)
        point.field("valid", record.valid)
        if record.valid and math.isfinite(record.cost_J):
            point.field("cost_J", float(record.cost_J))
        if record.trace_sigma_theta is not None and math.isfinite(record.trace_sigma_theta):
            point.field("trace_sigma_theta", float(record.trace_sigma_theta))

        logger.debug(f"Point created successfully: {point}")
        return point

    def _create_summary_point(self, summary: VariantSummary, regime: str) -> Point:
        """Create the aggregate point of one variant."""
        point = Point("mc_summary").tag("variant", summary.variant.value).tag("regime", regime)
        for field_key in ("mean_J", "std_J", "median_J", "q25", "q75", "mean_trace", "std_trace"):
            value = getattr(summary, field_key)
            if value is not None and math.isfinite(value):
                point.field(field_key, float(value))
        point.field("valid_runs", summary.valid_runs)
        point.field("total_runs", summary.total_runs)
        return point

    def export_result(self, result: McResult) -> int:
        """Write every run record plus one summary point per variant.

        Returns:
            Number of points written
        """
        write_api = self.influx_client.write_api(write_options=SYNCHRONOUS)
        regime = result.config.regime.value
        points: List[Point] = [self._create_run_point(record, regime) for record in result.records]
        points += [self._create_summary_point(summary, regime) for summary in result.aggregates.values()]
        write_api.write(bucket=self.bucket, org=self.org, record=points, precision="s")
        logger.info(f"Exported {len(points)} points to InfluxDB bucket {self.bucket}")
        return len(points)

    def close(self):
        """Close the InfluxDB client connection."""
        self.influx_client.close()
