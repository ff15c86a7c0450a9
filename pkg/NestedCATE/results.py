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
"""

import os

FLOAT_FORMAT = '%.10g'                                                                   # 10 significant digits in all tabular output

class CateResult:
    """Abstract class of tabular result structures (grid evaluations, bands, subgroup tables, validation reports)"""

    def __init__(self):
        self.DataTable    = None                                                         # Pandas dataframe with the result, fixed column order
        self.csvName      = None                                                         # file name used by writeCSV()
        self.storePath    = None                                                         # output directory

    def get_ParaNames(self):                                                             # get column names of self.DataTable
        return(list(self.DataTable))

    def writeCSV(self):
        """write self.DataTable to storePath/csvName; returns path written or None"""
        if self.csvName is not None and self.storePath is not None:
            os.makedirs(self.storePath, exist_ok=True)
            path = os.path.join(self.storePath, self.csvName)
            self.DataTable.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator='\n')
            return path
        print("Warning - writeCSV: csvName or storePath not defined, file not written")
        return None
