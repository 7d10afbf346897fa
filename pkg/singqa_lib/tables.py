
import math

from pandas import DataFrame


class DataFrameTextTable:
    """Adapt a pandas DataFrame to an aligned plain-text table (header row, index column, fixed float precision)."""

    def __init__(self, df: DataFrame, precision: int = 3, nan_text: str = 'n/a', min_width: int = 8):
        self._df = df
        self._precision = precision
        self._nan_text = nan_text
        self._min_width = min_width

    def row_count(self):
        return self._df.shape[0]

    def column_count(self):
        return self._df.shape[1]

    def data(self, row, col):
        value = self._df.iloc[row, col]
        if isinstance(value, float):
            return self._nan_text if math.isnan(value) else f'{value:.{self._precision}f}'
        return str(value)

    def header_data(self, section, horizontal=True):
        if horizontal:
            return str(self._df.columns[section])
        return str(self._df.index[section])

    def render(self) -> str:
        index_title = self._df.index.name or ''
        index_cells = [self.header_data(i, horizontal=False) for i in range(self.row_count())]
        index_width = max([len(index_title)] + [len(c) for c in index_cells])

        columns = []
        for j in range(self.column_count()):
            header = self.header_data(j)
            cells = [self.data(i, j) for i in range(self.row_count())]
            width = max([self._min_width, len(header)] + [len(c) for c in cells])
            columns.append((header, cells, width))

        lines = ['{0:{1}}'.format(index_title, index_width) + ''.join(f'  {h:>{w}}' for h, _, w in columns)]
        for i, name in enumerate(index_cells):
            lines.append('{0:{1}}'.format(name, index_width) + ''.join(f'  {c[i]:>{w}}' for _, c, w in columns))
        return '\n'.join(lines)

    def __str__(self):
        return self.render()
