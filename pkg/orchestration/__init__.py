from dagster import AssetSelection, Definitions, ScheduleDefinition, define_asset_job, load_assets_from_modules

from . import assets

all_assets = load_assets_from_modules([assets])

# Materialize every lab asset
lab_job = define_asset_job(name="evomoe_lab_job", selection=AssetSelection.all())

# Replays the all-to-all simulator on the trace of an existing run, no training
sim_job = define_asset_job(name="evomoe_sim_job", selection=AssetSelection.keys("routing_trace", "comm_report"))

# Weekly re-run (Monday at midnight)
weekly_schedule = ScheduleDefinition(
    job=lab_job,
    cron_schedule="0 0 * * 1",
)

defs = Definitions(
    assets=all_assets,
    jobs=[lab_job, sim_job],
    schedules=[weekly_schedule],
)
