"""
Copyright (C) 2026    NestedCATE contributors

This program is free software: you can redistribute it and/or modify
it under the terms of the GNU General Public License as published by
the Free Software Foundation, either version 3 of the License, or
(at your option) any later version.

This program is distributed in the hope that it will be useful,
but WITHOUT ANY WARRANTY; without even the implied warranty of
MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
GNU General Public License for more details.

You should have received a copy of the GNU General Public License
along with this program.  If not, see <https://www.gnu.org/licenses/>.

This is the main script to estimate conditional average treatment effects in a
target population from nested trial data. Subcommands:

    analyze     estimate the CATE curve with pointwise intervals and a uniform band
    simulate    write a simulated cohort and its true CATE
    validate    repeated simulate-and-analyze cycles: bias, RMSE, coverage

By default, cate_config.ini in the local directory is the configuration file. But
argument -c can specify a different file. Flags override values of the config file.
"""

import argparse
import sys
from datetime import datetime
from NestedCATE.cate_manager import CateManager
from NestedCATE.__init__ import __version__

if __name__ == "__main__":
    cfgParser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    cfgParser.add_argument('command', choices=['analyze', 'simulate', 'validate'], help="what to run")
    cfgParser.add_argument('-c', '--config', help="Specify config file (default: ./cate_config.ini)", metavar="FILE")
    cfgParser.add_argument('--input',       help="cohort file ([Input] file)", metavar="FILE")
    cfgParser.add_argument('--out',         help="output directory ([Run] out)", metavar="DIR")
    cfgParser.add_argument('--seed',        type=int,   help="top-level random seed ([Run] seed)")
    cfgParser.add_argument('--alpha',       type=float, help="1 - confidence level ([Run] alpha)")
    cfgParser.add_argument('--replicates',  type=int,   help="multiplier bootstrap replicates B ([Run] replicates)")
    cfgParser.add_argument('--grid-min',    type=float, help="lower grid bound ([Grid] min)")
    cfgParser.add_argument('--grid-max',    type=float, help="upper grid bound ([Grid] max)")
    cfgParser.add_argument('--grid-step',   type=float, help="grid increment ([Grid] step)")
    cfgParser.add_argument('--variant',     choices=['aipw', 'ipw', 'trial_only'], help="pseudo-outcome ([SecondStage] variant)")
    cfgParser.add_argument('--crossfit',    action='store_true', help="cross-fit nuisance models ([SecondStage] crossfit)")
    cfgParser.add_argument('--stratify-by', help="analyse strata of this column separately ([Schema] stratify)", metavar="COLUMN")
    args = cfgParser.parse_args()
    if args.config: cfgFile = args.config
    else:           cfgFile = 'cate_config.ini'

    overrides = { ('Input',       'file'):       args.input,
                  ('Run',         'out'):        args.out,
                  ('Run',         'seed'):       args.seed,
                  ('Run',         'alpha'):      args.alpha,
                  ('Run',         'replicates'): args.replicates,
                  ('Grid',        'min'):        args.grid_min,
                  ('Grid',        'max'):        args.grid_max,
                  ('Grid',        'step'):       args.grid_step,
                  ('SecondStage', 'variant'):    args.variant,
                  ('SecondStage', 'crossfit'):   1 if args.crossfit else None,
                  ('Schema',      'stratify'):   args.stratify_by }
    if args.command == 'validate':
        overrides[('Validate', 'replicates')] = args.replicates

    print("--v" + __version__ + "-"*(22 - len(__version__)) + " Start " + args.command + " (" + cfgFile + " at " + datetime.now().strftime("%Y-%m-%d, %H:%M:%S") + " - local)")
    myCateManager = CateManager(cfgFile, overrides)
    status        = myCateManager.runCommand(args.command)
    print("------------------------- End (" + datetime.now().strftime("%Y-%m-%d, %H:%M:%S") + " - local)")
    sys.exit(status)
