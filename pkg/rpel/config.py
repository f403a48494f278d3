"""
Determines some environment variables or otherwise hard-to-obtain values, which are needed
before the rest of this package gets initialized (e.g. the default number of parallel workers).
"""
__all__ = ['N_JOBS', 'VERBOSE', 'DEVICE_ID', 'get_dict']

#! Don't put any rpel imports here, this must be a standalone script that just processes some values!
import os
import sys

import psutil


if '--rpel-quiet' in sys.argv:
    os.environ['RPEL_VERBOSE'] = 'False'
elif '--rpel-verbose' in sys.argv:
    os.environ['RPEL_VERBOSE'] = 'True'

# N_JOBS: Int, default number of joblib workers for grid paths and replicates.
#         If RPEL_N_JOBS is not set, the number of physical cores is used.
N_JOBS = os.environ.get('RPEL_N_JOBS', None)
N_JOBS = int(N_JOBS) if isinstance(N_JOBS, str) and N_JOBS.strip() else (psutil.cpu_count(logical=False) or 1)

# VERBOSE: True or False, whether long loops (tuning grids, replicates) print progress messages
VERBOSE = os.environ.get('RPEL_VERBOSE', 'False').lower() in ('true', 't', '1', 'y', 'yes', 'on')

# DEVICE_ID: Int or None, used when several rpel processes share a machine, to tell their log lines apart.
DEVICE_ID = os.environ.get('RPEL_DEVICE_ID', None)
DEVICE_ID = int(DEVICE_ID.split(',')[0]) if isinstance(DEVICE_ID, str) else None

def get_dict():
    """ Returns a dictionary containing all the configuration parameters and their values at the moment. """
    return {
            'N_JOBS': N_JOBS,
            'VERBOSE': VERBOSE,
            'DEVICE_ID': DEVICE_ID
            }
