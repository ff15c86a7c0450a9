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

class CateError(Exception):
    """Base class of all errors raised by NestedCATE; exit_code is used by the command line front end"""
    category  = 'error'
    exit_code = 1

class ConfigError(CateError):
    """Invalid run configuration, model specification or basis specification"""
    category  = 'config'
    exit_code = 2

class DataError(CateError):
    """Input data violates the nested trial structure, or is too thin to estimate anything"""
    category  = 'data'
    exit_code = 3

class NumericError(CateError):
    """A fit failed numerically"""
    category  = 'numeric'
    exit_code = 4

class RankDeficiencyError(NumericError):
    pass

class SeparationError(NumericError):
    pass

class ConvergenceError(NumericError):
    pass
